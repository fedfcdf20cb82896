"""Knowledge-graph embedding models (ComplEx, RotatE)."""
from .checkpoint import CheckpointError, VocabularyMismatchError, load_checkpoint, save_checkpoint
from .models import ComplEx, KgeModel, RotatE, ScoreTableModel, UnknownIdError
from .training import TrainConfig, TrainingDiverged, TrainResult, train

__all__ = [
    "CheckpointError", "ComplEx", "KgeModel", "RotatE", "ScoreTableModel", "TrainConfig",
    "TrainResult", "TrainingDiverged", "UnknownIdError", "VocabularyMismatchError",
    "load_checkpoint", "save_checkpoint", "train",
]
