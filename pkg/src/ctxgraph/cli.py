"""Command-line entry point.

Every command reads one JSON run config (``--config``), writes its outputs
under ``--out`` and records a ``manifest.json`` there: the effective config,
backend identity and the sha256 of every output file. ``replay`` re-runs a
manifest and checks the outputs are byte-identical.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from . import __version__
from ._accel import backend_name
from .config import BackendConfig, ConfigError, RunConfig
from .evaluation import (FilterIndex, aggregate, em_score, evaluation_queries, exact_match, model_ranks,
                         query_degrees, write_report)
from .graph import ContextGraph, GraphError, Relation
from .ingest import (DumpSource, FetchPolicy, MappingTable, RemoteEntitySource, attach_entity_contexts,
                     extract_relation_contexts)
from .kgc import KgcPipeline, KgcQuery, export_sft_dataset
from .kge import CheckpointError, load_checkpoint, save_checkpoint, train
from .kgqa import answer_all, load_qa_dataset
from .llm import ECHO_CANDIDATES, HttpBackend, ScriptedBackend
from .textsim import LexicalScorer, RemoteEmbeddingScorer

log = logging.getLogger("ctxgraph")

MANIFEST = "manifest.json"


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _write_jsonl(path: Path, records) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def load_graph(cfg: RunConfig) -> ContextGraph:
    return ContextGraph.load(cfg.paths.require("graph_dir"))


def load_model(cfg: RunConfig, graph: ContextGraph):
    model, _ = load_checkpoint(cfg.paths.require("checkpoint"), graph)
    return model


def make_backend(cfg: RunConfig):
    b = cfg.backend
    if b.kind == "http":
        return HttpBackend(b.endpoint, b.model, b.max_tokens, b.temperature, b.api_key_env, b.max_in_flight,
                           b.requests_per_second)
    if cfg.paths.script:
        return ScriptedBackend.from_jsonl(cfg.paths.require("script"), default=b.default_reply)
    if b.default_reply is None:
        raise ConfigError("scripted backend needs paths.script or backend.default_reply")
    return ScriptedBackend(default=b.default_reply, name="scripted:default")


def make_scorer(cfg: RunConfig):
    s = cfg.scorer
    if s.kind == "remote":
        return RemoteEmbeddingScorer(s.endpoint, s.model, s.api_key_env)
    return LexicalScorer()


# ---------------------------------------------------------------- commands
# each returns (outputs written, extra manifest fields)

def cmd_ingest(cfg: RunConfig, out: Path, args) -> tuple[list[Path], dict]:
    graph = load_graph(cfg)
    src = cfg.paths.entity_dump
    if not src:
        raise ConfigError("paths.entity_dump is required for ingest (a JSONL dump or an http(s) endpoint)")
    mapping = MappingTable.load(cfg.paths.require("mapping")) if cfg.paths.mapping else {e: e for e in graph.entity_ids}
    if src.startswith(("http://", "https://")):
        source = RemoteEntitySource(src, FetchPolicy())
    else:
        source = DumpSource(cfg.paths.require("entity_dump"))
    report = attach_entity_contexts(graph, source, mapping)
    filled = extract_relation_contexts(graph, gamma=cfg.kgc.gamma)
    graph.save(out / "graph")
    cov = _write_json(out / "coverage.json", {**report.to_dict(), "relation_contexts": filled})
    return sorted((out / "graph").iterdir()) + [cov], {"coverage": report.coverage}


def cmd_train(cfg: RunConfig, out: Path, args) -> tuple[list[Path], dict]:
    graph = load_graph(cfg)
    result = train(graph, cfg.train)
    ckpt = out / "model.ckpt"
    save_checkpoint(result.model, ckpt, result.loss_curve)
    curve = _write_json(out / "loss_curve.json", result.loss_curve)
    filt = FilterIndex(graph)
    extra = {"final_loss": result.loss_curve[-1] if result.loss_curve else None, "accel": backend_name()}
    outputs = [ckpt, curve]
    if graph.split_array("valid").size:
        qs = evaluation_queries(graph, "valid")
        rep = aggregate(model_ranks(result.model, qs, filt), query_degrees(graph, qs))
        outputs.append(_write_json(out / "valid_metrics.json", rep.to_dict()))
        extra["valid_mrr"] = rep.mrr
    return outputs, extra


def cmd_rank(cfg: RunConfig, out: Path, args) -> tuple[list[Path], dict]:
    graph = load_graph(cfg)
    model = load_model(cfg, graph)
    if not (args.known and args.relation):
        raise ConfigError("rank needs --known and --relation")
    ranked = model.rank_all(args.known, Relation.parse(args.relation), args.missing)
    path = out / "ranking.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("position\tentity\tlabel\n")
        for i, e in enumerate(ranked.top(args.top), start=1):
            fh.write(f"{i}\t{e}\t{graph.label_of(e)}\n")
    return [path], {}


def _kgc(cfg: RunConfig):
    graph = load_graph(cfg)
    model = load_model(cfg, graph)
    pipe = KgcPipeline(graph, model, make_backend(cfg), cfg.kgc, make_scorer(cfg))
    return graph, pipe


def cmd_kgc_run(cfg: RunConfig, out: Path, args) -> tuple[list[Path], dict]:
    graph, pipe = _kgc(cfg)
    queries = [KgcQuery.from_eval(q) for q in evaluation_queries(graph, cfg.split)[:cfg.limit]]
    outcomes = pipe.run(queries)
    path = _write_jsonl(out / "outcomes.jsonl", (o.to_record() for o in outcomes))
    return [path], {"queries": len(outcomes), "backend": pipe.llm.identity()}


def cmd_kgc_eval(cfg: RunConfig, out: Path, args) -> tuple[list[Path], dict]:
    graph, pipe = _kgc(cfg)
    final, base, outcomes = pipe.evaluate(cfg.split, cfg.limit)
    queries = [o.query.to_eval() for o in outcomes]
    mj, rt = write_report(final, queries, out, extra={"baseline": base.to_dict()})
    oc = _write_jsonl(out / "outcomes.jsonl", (o.to_record() for o in outcomes))
    return [mj, rt, oc], {"mrr": final.mrr, "baseline_mrr": base.mrr, "backend": pipe.llm.identity()}


def cmd_export_sft(cfg: RunConfig, out: Path, args) -> tuple[list[Path], dict]:
    graph = load_graph(cfg)
    model = load_model(cfg, graph)
    path = out / "sft.jsonl"
    n = export_sft_dataset(graph, model, cfg.kgc.n, path, seed=cfg.seed, split="valid", limit=cfg.limit)
    return [path, Path(str(path) + ".meta.json")], {"samples": n}


def _qa(cfg: RunConfig):
    graph = load_graph(cfg)
    items = load_qa_dataset(cfg.paths.require("qa_dataset"))[:cfg.limit]
    llm = make_backend(cfg)
    results = answer_all(graph, llm, make_scorer(cfg), items, cfg.qa)
    return graph, items, results, llm


def _qa_outputs(out: Path, items, results, graph) -> list[Path]:
    answers = _write_jsonl(out / "answers.jsonl", (
        {"question": r.question, "answers": r.answers, "entities": r.entities, "iterations": r.iterations,
         "forced": r.forced, "em": exact_match(r.answers, it.answers, graph)} for it, r in zip(items, results)))
    traces = _write_jsonl(out / "traces.jsonl", (
        {"index": i, **ev} for i, r in enumerate(results) for ev in r.trace))
    return [answers, traces]


def cmd_qa_run(cfg: RunConfig, out: Path, args) -> tuple[list[Path], dict]:
    graph, items, results, llm = _qa(cfg)
    return _qa_outputs(out, items, results, graph), {"questions": len(results), "backend": llm.identity()}


def cmd_qa_eval(cfg: RunConfig, out: Path, args) -> tuple[list[Path], dict]:
    graph, items, results, llm = _qa(cfg)
    outputs = _qa_outputs(out, items, results, graph)
    em = em_score(((r.answers, it.answers) for it, r in zip(items, results)), graph)
    outputs.append(_write_json(out / "metrics.json", {"em": em, "questions": len(results)}))
    return outputs, {"em": em, "backend": llm.identity()}


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "rank": cmd_rank,
    "kgc-run": cmd_kgc_run,
    "kgc-eval": cmd_kgc_eval,
    "export-sft": cmd_export_sft,
    "qa-run": cmd_qa_run,
    "qa-eval": cmd_qa_eval,
}


def effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    if args.backend:
        b = args.backend
        if b == "echo":
            cfg = replace(cfg, backend=BackendConfig(default_reply=ECHO_CANDIDATES),
                          paths=replace(cfg.paths, script=None))
        elif b == "http":
            cfg = replace(cfg, backend=BackendConfig(**{**cfg.backend.__dict__, "kind": "http"}))
        else:
            script = Path(b)
            if not script.exists():
                raise ConfigError(f"--backend: expected 'echo', 'http' or a script file, got {b!r}")
            cfg = replace(cfg, backend=replace(cfg.backend, kind="scripted"),
                          paths=replace(cfg.paths, script=str(script.resolve())))
    return cfg


def run_command(command: str, cfg: RunConfig, out: Path, args) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    outputs, extra = COMMANDS[command](cfg, out, args)
    manifest = {
        "command": command,
        "version": __version__,
        "accel": backend_name(),
        "config": cfg.to_dict(),
        "args": {k: getattr(args, k, None) for k in ("known", "relation", "missing", "top")} if command == "rank" else {},
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in outputs},
        **extra,
    }
    _write_json(out / MANIFEST, manifest)
    return manifest


def cmd_replay(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(manifest["config"])
    target = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="ctxgraph-replay-"))
    ns = argparse.Namespace(**{"known": None, "relation": None, "missing": "tail", "top": 10, **manifest.get("args", {})})
    fresh = run_command(manifest["command"], cfg, target, ns)
    mismatched = sorted(k for k in set(manifest["outputs"]) | set(fresh["outputs"])
                        if manifest["outputs"].get(k) != fresh["outputs"].get(k))
    for k in mismatched:
        print(f"MISMATCH {k}: {manifest['outputs'].get(k)} != {fresh['outputs'].get(k)}", file=sys.stderr)
    print(json.dumps({"replayed": manifest["command"], "out": str(target), "identical": not mismatched,
                      "files": len(fresh["outputs"])}))
    if not args.out and not mismatched and not args.keep:
        shutil.rmtree(target, ignore_errors=True)
    return 1 if mismatched else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxgraph", description="Context-graph completion and question answering.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="run config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--backend", help="'echo', 'http' or a scripted reply file (JSONL)")
        sp.add_argument("--out", required=True, help="output directory")
        if name == "rank":
            sp.add_argument("--known", required=True)
            sp.add_argument("--relation", required=True)
            sp.add_argument("--missing", choices=("head", "tail"), default="tail")
            sp.add_argument("--top", type=int, default=10)
    rp = sub.add_parser("replay")
    rp.add_argument("manifest")
    rp.add_argument("--out", help="where to write the replayed outputs (default: a temporary directory)")
    rp.add_argument("--keep", action="store_true", help="keep the temporary directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return cmd_replay(args)
        cfg = effective_config(args)
        manifest = run_command(args.command, cfg, Path(args.out), args)
        print(json.dumps({k: v for k, v in manifest.items() if k not in ("config",)}, sort_keys=True))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (GraphError, CheckpointError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
