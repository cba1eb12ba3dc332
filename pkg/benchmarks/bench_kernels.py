"""Compare the compiled and NumPy kernels, and sweep the solve-time ordering over mesh sizes.

    python benchmarks/bench_kernels.py [--repeats 10] [--csv out.csv]
"""

import argparse
import sys

from darap import kernels, shapes
from darap.bench import bench_backends, bench_solves

SWEEP = {"torus-5k": (50, 50), "torus-10k": (72, 72), "torus-20k": (102, 102)}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--csv", help="append every report here as CSV")
    args = p.parse_args(argv)

    reports = []
    print(f"kernels available: {', '.join(kernels.available())} (active: {kernels.get().NAME})")
    for level in (3, 4, 5):
        r = bench_backends(shapes.icosphere(level), args.repeats, mesh_id=f"icosphere-{level}")
        reports.append(r)
        print(r.summary())
        if "cython" in kernels.available():
            for stage in ("local_step", "assemble_rhs", "forward", "backward"):
                c, py = r.stages[f"{stage}[cython]"].mean, r.stages[f"{stage}[python]"].mean
                print(f"  speedup {stage:<14} {py / c:6.2f}x")

    ok = True
    for name, (a, b) in SWEEP.items():
        r = bench_solves(shapes.torus(a, b), args.repeats, mesh_id=name)
        reports.append(r)
        print(r.summary())
        g, n = r.stages["darap_global"].mean, r.stages["njf_poisson"].mean
        ok &= g < n
        print(f"  dARAP global / NJF Poisson = {g / n:.3f}")

    if args.csv:
        with open(args.csv, "w") as fh:
            for i, r in enumerate(reports):
                fh.write(r.to_csv(header=i == 0))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
