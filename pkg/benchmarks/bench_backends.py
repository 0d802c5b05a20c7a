"""Benchmark the compiled coordinate-descent core against the pure
NumPy fallback.

Usage: python benchmarks/bench_backends.py [--cells 6000] [--genes 50]
       [--ranks 6] [--repeats 20]

Times the gene-sweep kernel in isolation on synthetic arrays, then a
small end-to-end fit under each backend (the backend is chosen at
import time, so the end-to-end comparison runs in subprocesses with
CPKERN_BACKEND set).
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np


def bench_sweep(n_cells, n_genes, repeats):
    from cpkern import _cdcore_py
    try:
        from cpkern import _cdcore
    except ImportError:
        _cdcore = None
    rng = np.random.default_rng(0)
    X = np.asfortranarray(rng.normal(size=(n_cells, n_genes)))
    kappa = rng.uniform(0.01, 2.0, n_cells)
    psi = rng.normal(size=n_cells)
    z1 = rng.normal(size=n_cells)
    q = rng.normal(size=n_genes)
    tau = 0.05

    def run(mod):
        f = rng.normal(size=n_cells).copy()
        s = X @ q
        qc = q.copy()
        return timeit.timeit(
            lambda: mod.gene_sweep(X, kappa, psi, f, z1, s, qc, tau),
            number=repeats) / repeats

    t_py = run(_cdcore_py)
    print("gene_sweep  python   : %8.3f ms/sweep" % (t_py * 1e3))
    if _cdcore is not None:
        t_c = run(_cdcore)
        print("gene_sweep  compiled : %8.3f ms/sweep  (%.1fx)"
              % (t_c * 1e3, t_py / t_c))
    else:
        print("gene_sweep  compiled : extension not built")


FIT_SNIPPET = r"""
import time
import numpy as np
from cpkern import backend
from cpkern.simulate import SimConfig, generate_replicate
from cpkern.kernels import bandwidth_candidates, compute_weights
from cpkern.solver import SolverConfig, fit

cfg = SimConfig(n_spots_mean=1500.0, n_plaques=60, p=30, seed=7)
truth = generate_replicate(cfg)
ds = truth.dataset
bw = bandwidth_candidates(ds, [15])
ws = compute_weights(ds, bw.column(15))
t0 = time.monotonic()
res = fit(ds, ws, lam=50.0, config=SolverConfig(max_rank=4, seed=0))
t1 = time.monotonic()
print("backend=%s rank=%d iters=%d wall=%.2fs"
      % (backend.BACKEND, res.rank, res.n_iterations, t1 - t0))
"""


def bench_fit():
    for which in ("c", "python"):
        env = dict(os.environ, CPKERN_BACKEND=which)
        proc = subprocess.run([sys.executable, "-c", FIT_SNIPPET], env=env,
                              capture_output=True, text=True)
        tail = proc.stdout.strip().splitlines()
        print("end-to-end %-7s: %s" % (which, tail[-1] if tail
                                       else proc.stderr.strip()[-200:]))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cells", type=int, default=6000)
    ap.add_argument("--genes", type=int, default=50)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    print("sweep size: %d cells x %d genes" % (args.cells, args.genes))
    bench_sweep(args.cells, args.genes, args.repeats)
    t0 = time.monotonic()
    bench_fit()
    print("end-to-end benchmark wall: %.1fs" % (time.monotonic() - t0))


if __name__ == "__main__":
    main()
