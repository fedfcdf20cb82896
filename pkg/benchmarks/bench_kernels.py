"""Time the numba kernels against their numpy counterparts.

    python benchmarks/bench_kernels.py [--entities 2000] [--dim 64] [--batch 256] [--negatives 64] [--repeat 5]

Both variants run in the same process on identical inputs; the numba timing
excludes the first (compiling) call. Outputs are also checked for agreement.
Add ``--train`` to time a short end-to-end training run under each setting
of ``CTXGRAPH_DISABLE_NUMBA`` (separate subprocesses).
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from ctxgraph._accel import HAVE_NUMBA
from ctxgraph.kge import kernels as K


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench(args) -> list[tuple[str, float, float, float]]:
    rng = np.random.default_rng(0)
    n, d, b, k = args.entities, args.dim, args.batch, args.negatives
    n_rel = 64
    ent = rng.normal(size=(n, 2 * d)) * 0.1
    rel = rng.normal(size=(n_rel, 2 * d)) * 0.1
    phase = rng.uniform(-np.pi, np.pi, size=(n_rel, d))
    h = rng.integers(0, n, b)
    r = rng.integers(0, n_rel, b)
    t = rng.integers(0, n, b)
    neg = rng.integers(0, n, (b, k))

    def complex_run(fn):
        ge, gr = np.zeros_like(ent), np.zeros_like(rel)
        return fn(ent, rel, h, r, t, neg, 1e-3, K.REG_N3, ge, gr), ge

    def rotate_run(fn, weights_fn=K.rotate_weights_np):
        w = weights_fn(ent, phase, h, r, neg, 6.0, 1.0)
        ge, gp = np.zeros_like(ent), np.zeros_like(phase)
        return fn(ent, phase, h, r, t, neg, 6.0, 1.0, w, ge, gp), ge

    # scoring and filtered ranks over all entities
    hr = ent[h]
    n_q = b
    scores = rng.normal(size=(n_q, n))
    gold = rng.integers(0, n, n_q)
    f_offsets = np.arange(0, 4 * n_q + 1, 4, dtype=np.int64)
    f_members = rng.integers(0, n, 4 * n_q).astype(np.int64)

    cases = [
        ("complex_loss_grad", lambda: complex_run(K.complex_loss_grad_nb), lambda: complex_run(K.complex_loss_grad_np)),
        ("rotate_loss_grad", lambda: rotate_run(K.rotate_loss_grad_nb), lambda: rotate_run(K.rotate_loss_grad_np)),
        ("rotate_scores", lambda: K.rotate_scores_nb(hr, ent), lambda: K.rotate_scores_np(hr, ent)),
        ("filtered_ranks", lambda: K.filtered_ranks_nb(scores, gold, f_offsets, f_members),
         lambda: K.filtered_ranks_np(scores, gold, f_offsets, f_members)),
    ]
    rows = []
    for name, nb, npf in cases:
        a, b_ = nb(), npf()  # warm-up (compiles the numba variant)
        err = _max_abs_diff(a, b_)
        t_nb = best_of(nb, args.repeat) if HAVE_NUMBA else float("nan")
        t_np = best_of(npf, args.repeat)
        rows.append((name, t_nb, t_np, err))
    return rows


def _max_abs_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_max_abs_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def bench_train(epochs: int) -> None:
    code = (
        "import time;from ctxgraph.toy import random_graph;from ctxgraph.kge import TrainConfig, train;"
        "from ctxgraph._accel import backend_name;"
        "g=random_graph(0,n_entities=500,n_relations=20,n_triples=8000);"
        f"c=TrainConfig(model='rotate',dim=32,epochs={epochs},batch_size=256,negatives=32,seed=0);"
        "train(g,TrainConfig(model='rotate',dim=32,epochs=1,batch_size=256,negatives=32,seed=0));"
        "t=time.perf_counter();r=train(g,c);print(backend_name(),f'{time.perf_counter()-t:.3f}s',r.loss_curve[-1])"
    )
    for flag in ("0", "1"):
        env = {**os.environ, "CTXGRAPH_DISABLE_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        print(f"train rotate ({epochs} epochs): {out.stdout.strip()}")


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--entities", type=int, default=2000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--negatives", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--train", action="store_true")
    p.add_argument("--epochs", type=int, default=5)
    args = p.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba unavailable or disabled; only numpy timings are meaningful")
    print(f"{'kernel':<20}{'numba (ms)':>12}{'numpy (ms)':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, t_nb, t_np, err in bench(args):
        print(f"{name:<20}{t_nb * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_nb:>10.2f}{err:>14.2e}")
    if args.train:
        bench_train(args.epochs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
