"""Compiled (numba) versus vectorised NumPy leapfrog kernels.

Two measurements:

* kernel level: ``step_*_loops`` (numba) and ``step_*_numpy`` called on identical arrays in this
  process, after one warm-up call so compilation is excluded;
* end to end: the same ``march`` run in two subprocesses, one with ``DTNLAB_DISABLE_NUMBA=1``.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat N] [--json PATH]``.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from dtnlab import kernels
from dtnlab.fields import Coefficients, PotentialSet, sampler_from_spec
from dtnlab.forward import Stencil, stable_dt
from dtnlab.geometry import Grid, conformal_metric


def _coeffs(n: int) -> Coefficients:
    sp = lambda d: sampler_from_spec(d, n)  # noqa: E731
    c = [0.4] * n
    gauss = {"type": "gauss", "center": c, "width": 0.3}
    A0 = sp({"terms": [{"amplitude": 0.3, "factors": [gauss, {"type": "tpoly", "coeffs": [1, 0.5]}]}]})
    A = tuple(sp({"terms": [{"amplitude": 0.2, "factors": [{"type": "cos", "k": [2.0] * n, "omega": 1.0}]}]})
              for _ in range(n))
    V = sp({"terms": [{"amplitude": -0.5, "factors": [gauss]}]})
    return Coefficients(conformal_metric(n, 0.2, c, 0.25), PotentialSet(A0, A, V, True))


def _time(fn, repeat: int) -> float:
    fn()
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_case(n: int, shape: tuple, batch: int, steps: int, repeat: int) -> dict:
    grid = Grid((1.0,) * n, shape)
    co = _coeffs(n)
    dt = stable_dt(co, grid, 0.5)
    st = Stencil(co, grid, dt)
    args = st.at(0.3)
    rng = np.random.default_rng(0)
    full = (batch,) + grid.shape
    up = rng.standard_normal(full) + 1j * rng.standard_normal(full)
    uc = rng.standard_normal(full) + 1j * rng.standard_normal(full)
    out = {}
    for name, fn in (("numba", kernels.step_1d_loops if n == 1 else kernels.step_2d_loops),
                     ("numpy", kernels.step_1d_numpy if n == 1 else kernels.step_2d_numpy)):
        un = np.zeros_like(uc)
        h = grid.h

        def run():
            for _ in range(steps):
                fn(up, uc, un, *args, dt, *h)

        out[name] = _time(run, repeat) / steps
        out[f"{name}_result"] = un.copy()
    diff = float(np.abs(out.pop("numba_result") - out.pop("numpy_result")).max())
    return {"n": n, "shape": list(grid.shape), "batch": batch, "sec_per_step": out,
            "speedup": out["numpy"] / out["numba"], "max_abs_difference": diff}


MARCH = """
import json, sys, time
import numpy as np
from dtnlab import backend_name
from dtnlab.forward import BoundaryData, march
sys.path.insert(0, {here!r})
from bench_kernels import _coeffs
from dtnlab.geometry import Grid
n, cells, batch = {n}, {cells}, {batch}
grid = Grid((1.0,) * n, (cells,) * n)
f = lambda t: np.sin(6 * t) ** 3 * np.ones((batch, grid.shape[0] if n == 2 else 1))
data = BoundaryData(f, batch, grid.shape[0] if n == 2 else 1)
co = _coeffs(n)
march(co, grid, data, 0.0, 0.02, cfl=0.5, keep_rows=False)
t = time.perf_counter()
w = march(co, grid, data, 0.0, 0.5, cfl=0.5)
print(json.dumps({{"backend": backend_name(), "seconds": time.perf_counter() - t, "steps": w.nt,
                  "checksum": float(np.abs(w.rows).sum())}}))
"""


def march_case(n: int, cells: int, batch: int) -> dict:
    here = os.path.dirname(os.path.abspath(__file__))
    code = MARCH.format(here=here, n=n, cells=cells, batch=batch)
    res = {}
    for flag in ("0", "1"):
        env = dict(os.environ, DTNLAB_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        r = json.loads(out.stdout.strip().splitlines()[-1])
        res[r["backend"]] = r
    return {"n": n, "cells": cells, "batch": batch,
            "seconds": {k: v["seconds"] for k, v in res.items()},
            "speedup": res["numpy"]["seconds"] / res["numba"]["seconds"],
            "checksum_relative_difference": abs(res["numpy"]["checksum"] - res["numba"]["checksum"])
            / res["numpy"]["checksum"]}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", help="write the results to this file")
    args = ap.parse_args(argv)
    if not kernels.NUMBA_ENABLED:
        print("numba is disabled or missing; only the NumPy path can be timed", file=sys.stderr)
        return 1
    results = {"kernels": [kernel_case(1, (2000,), 16, 200, args.repeat),
                           kernel_case(2, (200, 200), 4, 20, args.repeat)],
               "march": [march_case(1, 2000, 8), march_case(2, 160, 2)]}
    for r in results["kernels"]:
        s = r["sec_per_step"]
        print(f"kernel n={r['n']} shape={r['shape']} batch={r['batch']}: numba {s['numba'] * 1e3:.3f} ms, "
              f"numpy {s['numpy'] * 1e3:.3f} ms, speedup {r['speedup']:.1f}x, max|diff| {r['max_abs_difference']:.1e}")
    for r in results["march"]:
        s = r["seconds"]
        print(f"march  n={r['n']} cells={r['cells']} batch={r['batch']}: numba {s['numba']:.2f} s, "
              f"numpy {s['numpy']:.2f} s, speedup {r['speedup']:.1f}x, "
              f"checksum rel diff {r['checksum_relative_difference']:.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
