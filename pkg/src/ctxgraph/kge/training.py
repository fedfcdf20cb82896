"""Seeded mini-batch training with uniform tail corruption and Adam."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..graph import ContextGraph
from . import kernels
from .models import ComplEx, KgeModel, RotatE, wrap_phase

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite loss {loss} in epoch {epoch}")


@dataclass
class TrainConfig:
    model: str = "complex"
    dim: int = 256
    negatives: int = 256
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 100
    adversarial_temperature: float = 1.0
    margin: float = 9.0
    regularization: float = 1e-3
    regularizer: str = "n3"
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.model not in ("complex", "rotate"):
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.regularizer not in ("n3", "l2"):
            raise ValueError("regularizer must be 'n3' or 'l2'")
        for name in ("dim", "negatives", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or self.init_scale <= 0 or self.margin <= 0:
            raise ValueError("lr, init_scale and margin must be positive")
        if self.adversarial_temperature < 0 or self.regularization < 0:
            raise ValueError("temperature and regularization must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def training_triples(graph: ContextGraph) -> np.ndarray:
    """Train triples plus their reversed views, as (n, 3) index rows."""
    train = graph.split_array("train")
    return np.concatenate([train, train[:, [2, 1, 0]] + np.array([0, 1, 0])])


def init_model(graph: ContextGraph, config: TrainConfig, rng: np.random.Generator) -> KgeModel:
    graph.freeze()
    meta = config.to_dict()
    if config.model == "complex":
        return ComplEx.init(graph.entity_ids, graph.relation_ids, config.dim, rng, config.init_scale, meta)
    return RotatE.init(graph.entity_ids, graph.relation_ids, config.dim, rng, config.margin, meta)


def batch_loss_grad(model: KgeModel, config: TrainConfig, batch: np.ndarray, neg: np.ndarray,
                    weights: np.ndarray = kernels.NO_WEIGHTS, kernel=None):
    """Loss and dense gradients for one batch; ``kernel`` overrides the dispatch."""
    g_ent = np.zeros_like(model.ent)
    g_rel = np.zeros_like(model.rel)
    h = np.ascontiguousarray(batch[:, 0])
    r = np.ascontiguousarray(batch[:, 1])
    t = np.ascontiguousarray(batch[:, 2])
    neg = np.ascontiguousarray(neg, dtype=np.int64)
    if isinstance(model, ComplEx):
        fn = kernel or kernels.complex_loss_grad
        reg_kind = kernels.REG_N3 if config.regularizer == "n3" else kernels.REG_L2
        loss = fn(model.ent, model.rel, h, r, t, neg, float(config.regularization), reg_kind, g_ent, g_rel)
    elif isinstance(model, RotatE):
        fn = kernel or kernels.rotate_loss_grad
        loss = fn(model.ent, model.rel, h, r, t, neg, float(config.margin),
                  float(config.adversarial_temperature), np.ascontiguousarray(weights, dtype=np.float64), g_ent, g_rel)
    else:
        raise TypeError(f"cannot train {type(model).__name__}")
    return float(loss), g_ent, g_rel


@dataclass
class TrainResult:
    model: KgeModel
    loss_curve: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train(graph: ContextGraph, config: TrainConfig, progress=None) -> TrainResult:
    """Train from the seeded initialisation; ``epochs=0`` returns the init unchanged.

    All randomness (init, shuffling, negatives) comes from one generator seeded
    with ``config.seed``, consumed in a fixed order.
    """
    graph.freeze()
    data = training_triples(graph)
    if not len(data):
        raise ValueError("train split is empty")
    rng = np.random.default_rng(config.seed)
    model = init_model(graph, config, rng)
    opt = Adam([model.ent, model.rel], config.lr)
    n_ent = graph.num_entities
    curve: list[float] = []
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(data))
        total, count = 0.0, 0
        for a in range(0, len(data), config.batch_size):
            batch = data[perm[a:a + config.batch_size]]
            neg = rng.integers(0, n_ent, size=(len(batch), config.negatives))
            loss, g_ent, g_rel = batch_loss_grad(model, config, batch, neg)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            opt.step([g_ent, g_rel])
            if isinstance(model, RotatE):
                wrap_phase(model.rel)
            total += loss * len(batch)
            count += len(batch)
        epoch_loss = total / count
        if not np.isfinite(epoch_loss) or not (np.isfinite(model.ent).all() and np.isfinite(model.rel).all()):
            raise TrainingDiverged(epoch, epoch_loss)
        curve.append(epoch_loss)
        if progress:
            progress(epoch, epoch_loss)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return TrainResult(model, curve, time.perf_counter() - start)
