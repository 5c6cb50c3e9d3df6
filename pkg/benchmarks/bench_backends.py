"""Benchmark the numba kernels against the pure-numpy fallback.

Runs both implementations of every hot kernel on identical inputs and
reports wall time plus the agreement between results. Usage:

    python benchmarks/bench_backends.py [--particles 4096] [--steps 20]
"""

import argparse
import time

import numpy as np

from sphgnn import sph
from sphgnn.backend import NUMBA_AVAILABLE
from sphgnn.box import DomainSpec
from sphgnn.neighbors import build_edges


def timeit(fn, repeats):
    fn()  # warmup / JIT
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = fn()
    return (time.perf_counter() - t0) / repeats, out


def bench_neighbors(pos, domain, radius, repeats):
    rows = []
    t_nb = t_np = float("nan")
    e_nb = e_np = None
    if NUMBA_AVAILABLE:
        t_nb, e_nb = timeit(lambda: build_edges(pos, domain, radius, use_numba=True), repeats)
    t_np, e_np = timeit(lambda: build_edges(pos, domain, radius, use_numba=False), repeats)
    agree = "-"
    if e_nb is not None:
        same = (
            np.array_equal(e_nb.senders, e_np.senders)
            and np.array_equal(e_nb.receivers, e_np.receivers)
            and np.allclose(e_nb.disp, e_np.disp, atol=1e-14)
        )
        agree = "exact" if same else "MISMATCH"
    rows.append(("neighbor search", t_nb, t_np, agree, f"{len(e_np)} edges"))
    return rows, e_np


def bench_sph_step(state, config, edges, repeats):
    t_nb = float("nan")
    s_nb = None
    if NUMBA_AVAILABLE:
        t_nb, s_nb = timeit(lambda: sph.sph_step(state, config, edges, use_numba=True), repeats)
    t_np, s_np = timeit(lambda: sph.sph_step(state, config, edges, use_numba=False), repeats)
    agree = "-"
    if s_nb is not None:
        dv = np.abs(s_nb.vel - s_np.vel).max()
        agree = f"|dv|max={dv:.1e}"
    return [("sph step", t_nb, t_np, agree, f"{state.n} particles")]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--particles", type=int, default=4096)
    ap.add_argument("--steps", type=int, default=10)
    args = ap.parse_args()

    n_side = max(2, round(args.particles ** (1.0 / 3.0)))
    cfg = sph.tgv_config(dx=1.0 / n_side, relax_steps=0)
    state = sph.tgv_init(n_side, cfg, np.random.default_rng(0))
    domain = DomainSpec((1.0, 1.0, 1.0))

    rows, edges = bench_neighbors(state.pos, domain, cfg.cutoff, args.steps)
    rows += bench_sph_step(state, cfg, edges, args.steps)

    print(f"\n{n_side ** 3} particles, cutoff {cfg.cutoff:.3f}, {args.steps} repeats")
    print(f"numba available: {NUMBA_AVAILABLE}\n")
    print(f"{'kernel':<16} {'numba':>10} {'numpy':>10} {'speedup':>8}  {'agreement':<14} notes")
    for name, t_nb, t_np, agree, note in rows:
        speed = f"{t_np / t_nb:.1f}x" if np.isfinite(t_nb) else "-"
        nb = f"{t_nb * 1e3:.2f} ms" if np.isfinite(t_nb) else "-"
        print(f"{name:<16} {nb:>10} {t_np * 1e3:>7.2f} ms {speed:>8}  {agree:<14} {note}")


if __name__ == "__main__":
    main()
