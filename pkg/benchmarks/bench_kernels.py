"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on the same inputs through both backends; the script
checks the outputs agree and prints the best-of-``repeat`` wall time.
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from roughspde import _kernels_py

try:
    from roughspde import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def cases(rng):
    M, n, B = 2**13, 17, 17
    G = rng.standard_normal((M, n))
    decay = np.exp(-np.linspace(0.0, 5.0, n) * 1e-3)
    init = rng.standard_normal(n)
    yield "semigroup_scan", (G, decay, init, False)
    yield "semigroup_scan_reverse", (G, decay, init, True)

    fine = rng.standard_normal((2**17, 2)) * 2**-8.5
    yield "block_areas", (fine, 16, 0.5)

    A = np.eye(n)[None] + 1e-2 * rng.standard_normal((2**11, n, n))
    C = rng.standard_normal((2**11, n)) * 1e-2
    X0 = rng.standard_normal((n, B))
    yield "linear_propagate", (A, C, X0, False)


def run(repeat: int):
    rng = np.random.default_rng(0)
    out = []
    for name, args in cases(rng):
        kernel = name.replace("_reverse", "")
        py = getattr(_kernels_py, kernel)
        ref = py(*args)
        t_py = min(timeit.repeat(lambda: py(*args), number=1, repeat=repeat))
        row = {"kernel": name, "python_s": t_py, "cython_s": float("nan"), "speedup": float("nan"), "max_diff": float("nan")}
        if _compiled is not None:
            cy = getattr(_compiled, kernel)
            res = cy(*args)
            diff = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) for a, b in
                       zip(res if isinstance(res, tuple) else (res,), ref if isinstance(ref, tuple) else (ref,)))
            t_cy = min(timeit.repeat(lambda: cy(*args), number=1, repeat=repeat))
            row.update(cython_s=t_cy, speedup=t_py / t_cy, max_diff=diff)
        out.append(row)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write the table as JSON")
    args = ap.parse_args()
    rows = run(args.repeat)
    print(f"{'kernel':26s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speedup':>8s} {'max diff':>10s}")
    for r in rows:
        print(f"{r['kernel']:26s} {1e3 * r['python_s']:12.3f} {1e3 * r['cython_s']:12.3f} "
              f"{r['speedup']:8.1f} {r['max_diff']:10.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
