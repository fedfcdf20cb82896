import json

import numpy as np
import pytest

from ctxgraph.cli import main
from ctxgraph.config import RunConfig
from ctxgraph.graph import ContextGraph
from ctxgraph.kgc import KgcParams, KgcPipeline
from ctxgraph.kge import TrainConfig, load_checkpoint
from ctxgraph.kge.training import init_model
from ctxgraph.llm import ECHO_CANDIDATES, ScriptedBackend
from ctxgraph.toy import random_graph

TRAIN = {"model": "rotate", "dim": 8, "negatives": 4, "batch_size": 32, "epochs": 2, "lr": 0.01, "seed": 3}


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out if capsys else ""
    return code, out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    g = random_graph(2, n_entities=24, n_relations=3, n_triples=100)
    g.save(root / "raw")
    with (root / "dump.jsonl").open("w", encoding="utf-8") as fh:
        for i, e in enumerate(g.entity_ids[:-2]):
            para = f"Entity {i} is a place. It lies near entity {(i + 1) % 20}."
            fh.write(json.dumps({"id": e, "label": f"Entity {i}", "description": "a place",
                                 "wiki_paragraph": para}) + "\n")
    ingest_cfg = {"paths": {"graph_dir": "raw", "entity_dump": "dump.jsonl"}}
    (root / "ingest.json").write_text(json.dumps(ingest_cfg), encoding="utf-8")
    (root / "qa.jsonl").write_text(
        json.dumps({"question": "What is near Entity 1?", "answers": ["Entity 2"], "topic_entities": [g.entity_ids[1]]})
        + "\n" + json.dumps({"question": "Where is Entity 3?", "answers": ["Entity 4"]}) + "\n", encoding="utf-8")
    (root / "script.jsonl").write_text(
        json.dumps({"match": "The topic entities:", "reply": "The topic entities: [Entity 3]"}) + "\n"
        + json.dumps({"match": "Sufficient:", "reply": "Sufficient: Yes\nThe possible answers: [Entity 4]"}) + "\n",
        encoding="utf-8")
    cfg = {
        "paths": {"graph_dir": "ingest/graph", "checkpoint": "train/model.ckpt", "qa_dataset": "qa.jsonl"},
        "train": TRAIN,
        "kgc": {"k": 1, "n": 5, "delta": 10, "demos": 1, "retries": 0},
        "qa": {"M": 2, "N": 5, "D_max": 2, "retries": 0},
        "limit": 6,
    }
    (root / "run.json").write_text(json.dumps(cfg), encoding="utf-8")
    return root


def test_pipeline_end_to_end_and_replay(workspace, capsys):
    w = workspace
    assert run(["ingest", "--config", w / "ingest.json", "--out", w / "ingest"], capsys)[0] == 0
    cov = json.loads((w / "ingest" / "coverage.json").read_text(encoding="utf-8"))
    assert cov["fetched"] == cov["total"] - 2
    assert run(["train", "--config", w / "run.json", "--out", w / "train"], capsys)[0] == 0
    assert (w / "train" / "valid_metrics.json").exists()
    assert run(["kgc-eval", "--config", w / "run.json", "--backend", "echo", "--out", w / "kgc"], capsys)[0] == 0
    metrics = json.loads((w / "kgc" / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["count"] == 6 and "baseline" in metrics
    assert len((w / "kgc" / "outcomes.jsonl").read_text(encoding="utf-8").splitlines()) == 6
    assert run(["export-sft", "--config", w / "run.json", "--seed", 7, "--out", w / "sft"], capsys)[0] == 0
    assert run(["qa-eval", "--config", w / "run.json", "--backend", w / "script.jsonl", "--out", w / "qa"], capsys)[0] == 0
    qa = json.loads((w / "qa" / "metrics.json").read_text(encoding="utf-8"))
    assert qa["questions"] == 2 and 0.0 <= qa["em"] <= 1.0
    code, out = run(["rank", "--config", w / "run.json", "--known", "e01", "--relation", "r00", "--top", 3,
                     "--out", w / "rank"], capsys)
    assert code == 0
    assert len((w / "rank" / "ranking.tsv").read_text(encoding="utf-8").splitlines()) == 4

    for step in ("ingest", "train", "kgc", "sft", "qa", "rank"):
        code, out = run(["replay", w / step / "manifest.json"], capsys)
        assert code == 0, step
        assert json.loads(out.strip().splitlines()[-1])["identical"] is True


def test_manifest_config_round_trip(workspace, capsys):
    w = workspace
    manifest = json.loads((w / "kgc" / "manifest.json").read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(manifest["config"])
    assert cfg.to_dict() == manifest["config"]
    assert cfg.backend.default_reply == ECHO_CANDIDATES
    assert manifest["outputs"].keys() == {"metrics.json", "ranks.tsv", "outcomes.jsonl"}


def test_kgc_metrics_match_library(workspace):
    """The CLI numbers equal a direct library run with the same inputs."""
    w = workspace
    graph = ContextGraph.load(w / "ingest" / "graph")
    model, _ = load_checkpoint(w / "train" / "model.ckpt", graph)
    pipe = KgcPipeline(graph, model, ScriptedBackend(default=ECHO_CANDIDATES),
                       KgcParams(k=1, n=5, delta=10, demos=1, retries=0))
    final, base, _ = pipe.evaluate("test", 6)
    metrics = json.loads((w / "kgc" / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["mrr"] == final.mrr and metrics["baseline"]["mrr"] == base.mrr
    # echo keeps the candidate order and A_LLM is empty, so nothing moves
    assert final.ranks == base.ranks


def test_replay_detects_tampering(workspace, capsys):
    w = workspace
    target = w / "kgc" / "metrics.json"
    original = target.read_bytes()
    manifest = json.loads((w / "kgc" / "manifest.json").read_text(encoding="utf-8"))
    manifest["outputs"]["metrics.json"] = "0" * 64
    bad = w / "tampered.json"
    bad.write_text(json.dumps(manifest), encoding="utf-8")
    assert run(["replay", bad, "--out", w / "replayed"], capsys)[0] == 1
    assert target.read_bytes() == original


def test_unknown_config_key_exits_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"trian": {}}), encoding="utf-8")
    code = main(["train", "--config", str(p), "--out", str(tmp_path / "o")])
    assert code == 2 and "unknown top-level keys" in capsys.readouterr().err
    p.write_text(json.dumps({"train": {"epoch": 3}}), encoding="utf-8")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--backend", "nope.jsonl", "--out", str(tmp_path / "o")]) == 2


def test_bad_inputs_exit_codes(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"paths": {"graph_dir": "absent"}}), encoding="utf-8")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "absent").mkdir()
    (tmp_path / "absent" / "train.txt").write_text("a\tr\n", encoding="utf-8")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "error:" in capsys.readouterr().err


def test_zero_epochs_checkpoint_equals_init(workspace, tmp_path, capsys):
    w = workspace
    cfg = json.loads((w / "run.json").read_text(encoding="utf-8"))
    cfg["train"]["epochs"] = 0
    cfg["paths"]["graph_dir"] = str(w / "ingest" / "graph")
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg), encoding="utf-8")
    assert run(["train", "--config", p, "--out", tmp_path / "t"], capsys)[0] == 0
    graph = ContextGraph.load(w / "ingest" / "graph")
    model, _ = load_checkpoint(tmp_path / "t" / "model.ckpt", graph)
    init = init_model(graph, TrainConfig(**{**TRAIN, "epochs": 0}), np.random.default_rng(TRAIN["seed"]))
    for k, v in init.arrays().items():
        np.testing.assert_array_equal(model.arrays()[k], v)
    assert json.loads((tmp_path / "t" / "loss_curve.json").read_text(encoding="utf-8")) == []
