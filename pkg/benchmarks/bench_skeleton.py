"""Time the compiled and pure-Python thinning backends on the same masks.

    python3 benchmarks/bench_skeleton.py [--sizes 32 48 64] [--repeats 3]

Masks are phantom vessel trees (foreground = aorta + coronaries) plus a
solid ball, so both thin-tube and thick-blob workloads are covered. Each
backend's output is checked against the other before timing is reported.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from ctnvessel.metrics import BACKENDS, skeletonize
from ctnvessel.volio import PhantomSpec, generate_phantom


def workloads(sizes):
    for n in sizes:
        _, mask = generate_phantom(PhantomSpec(seed=0, grid_size=n))
        yield f"phantom{n}", mask.data > 0
        zz, yy, xx = np.mgrid[:n, :n, :n]
        c = (n - 1) / 2
        yield f"ball{n}", (zz - c) ** 2 + (yy - c) ** 2 + (xx - c) ** 2 <= (n / 3) ** 2


def best_time(mask, backend, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = skeletonize(mask, backend=backend)
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 48, 64])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--json", action="store_true", help="print one JSON object per workload")
    args = ap.parse_args(argv)
    if "compiled" not in BACKENDS:
        print("compiled backend not built; timing the Python fallback only")
    if not args.json:
        print(f"{'workload':<12}{'voxels':>8}" + "".join(f"{b + ' (s)':>16}" for b in BACKENDS) + f"{'speedup':>10}")
    for name, mask in workloads(args.sizes):
        row = {"workload": name, "voxels": int(mask.sum())}
        outs = {}
        for b in BACKENDS:
            row[b], outs[b] = best_time(mask, b, args.repeats)
        if len(outs) == 2:
            row["identical"] = bool(np.array_equal(outs["compiled"], outs["python"]))
            row["speedup"] = row["python"] / row["compiled"]
        if args.json:
            print(json.dumps(row))
        else:
            line = f"{name:<12}{row['voxels']:>8}" + "".join(f"{row[b]:>16.4f}" for b in BACKENDS)
            if "speedup" in row:
                line += f"{row['speedup']:>9.1f}x" + ("" if row["identical"] else "  OUTPUT MISMATCH")
            print(line)


if __name__ == "__main__":
    main()
