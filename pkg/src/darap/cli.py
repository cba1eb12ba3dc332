"""Command-line front end: deform, stylize, retarget, metrics, bench, check.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical/solver failure,
4 guidance-protocol failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__

log = logging.getLogger("darap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_GUIDANCE = 0, 1, 2, 3, 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="darap", description="Normal-driven differentiable ARAP deformation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=_positive_int, help="cap BLAS/OpenMP threads")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    d = sub.add_parser("deform", help="apply one local/global step for given target normals")
    d.add_argument("--mesh", required=True)
    d.add_argument("--normals", required=True, help="CSV, one nx,ny,nz row per vertex")
    d.add_argument("--lambda", dest="lam", type=_nonneg_float, default=8.0)
    d.add_argument("--out", required=True)
    d.add_argument("--mask", help="one 0/1 per line")
    d.add_argument("--no-restore-bbox", dest="restore_bbox", action="store_false")
    d.add_argument("--rotations", help="also dump the rotation field as CSV")

    s = sub.add_parser("stylize", help="optimize target normals against a guidance source")
    s.add_argument("--mesh", required=True)
    s.add_argument("--driver", choices=["cubify", "field", "vertex-match", "external"], default="cubify")
    s.add_argument("--field", default="axis-snap", help="field driver table: axis-snap, identity, or constant:X,Y,Z")
    s.add_argument("--target", help="target OBJ for the vertex-match driver")
    s.add_argument("--external-cmd", help="guidance command for the external driver")
    s.add_argument("--timeout", type=_positive_float, default=120.0, help="external reply timeout per epoch (s)")
    s.add_argument("--lambda", dest="lam", type=_nonneg_float, default=8.0)
    s.add_argument("--lr", type=_positive_float, default=0.002)
    s.add_argument("--epochs", type=_positive_int, default=2500)
    s.add_argument("--updates-per-epoch", type=_positive_int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mask")
    s.add_argument("--no-restore-bbox", dest="restore_bbox", action="store_false")
    s.add_argument("--out", required=True)
    s.add_argument("--save-normals")
    s.add_argument("--trace")

    r = sub.add_parser("retarget", help="re-apply saved target normals at a new strength")
    r.add_argument("--mesh", required=True)
    r.add_argument("--normals", required=True)
    r.add_argument("--lambda", dest="lam", type=_nonneg_float, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--mask")
    r.add_argument("--no-restore-bbox", dest="restore_bbox", action="store_false")

    m = sub.add_parser("metrics", help="evaluation statistics")
    msub = m.add_subparsers(dest="metric", metavar="METRIC", parser_class=_Parser)
    msub.required = True
    a = msub.add_parser("area-ratio", help="face-area ratio after cube/bbox normalization")
    a.add_argument("--source", required=True)
    a.add_argument("--deformed", required=True)
    a.add_argument("--csv", help="write the stats row here")
    a.add_argument("--histogram", help="write the histogram here")
    dp = msub.add_parser("displacement", help="per-vertex Euclidean displacement")
    dp.add_argument("--source", required=True)
    dp.add_argument("--deformed", required=True)
    ax = msub.add_parser("axis-deviation", help="area-weighted face-normal angle to the nearest axis")
    ax.add_argument("--mesh", required=True)

    b = sub.add_parser("bench", help="time local step, dARAP global solve and NJF solve")
    b.add_argument("--mesh", required=True, help="OBJ path, or a built-in: torus:N, icosphere:N, bumpy:N")
    b.add_argument("--repeats", type=_positive_int, default=10)
    b.add_argument("--csv")
    b.add_argument("--backends", action="store_true", help="compare compiled and NumPy kernels instead")

    c = sub.add_parser("check", help="validate a mesh")
    c.add_argument("--mesh", required=True)
    c.add_argument("--csv", action="store_true", help="CSV instead of text")
    return p


def _write_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_mask(args, n):
    from .core import load_mask

    return load_mask(args.mask, n) if args.mask else None


def _bench_mesh(text):
    from . import shapes
    from .mesh import load_obj

    name, _, arg = text.partition(":")
    if arg and name in ("torus", "icosphere", "bumpy"):
        n = int(arg)
        return {"torus": lambda: shapes.torus(n, n), "icosphere": lambda: shapes.icosphere(n), "bumpy": lambda: shapes.bumpy_sphere(n)}[name]()
    return load_obj(text)


def _field_table(text):
    from .errors import DataError
    from .style import SphereTable

    if text == "axis-snap":
        return SphereTable.axis_snap()
    if text == "identity":
        return SphereTable.identity(2)
    if text.startswith("constant:"):
        try:
            d = [float(x) for x in text[len("constant:"):].split(",")]
        except ValueError:
            raise DataError(f"bad constant field {text!r}") from None
        if len(d) != 3:
            raise DataError(f"bad constant field {text!r}")
        return SphereTable.constant(d)
    raise DataError(f"unknown field table {text!r}")


def cmd_deform(args):
    from .core import DeformConfig, TargetNormals, deform
    from .mesh import load_obj, save_obj
    from .operators import build_operators

    mesh = load_obj(args.mesh)
    targets = TargetNormals.load(args.normals, mesh.n_vertices)
    ops = build_operators(mesh)
    cfg = DeformConfig(lam=args.lam, mask=_load_mask(args, mesh.n_vertices), restore_bbox=args.restore_bbox)
    out, rots = deform(mesh, ops, targets, cfg)
    save_obj(out, args.out)
    if args.rotations:
        _write_text(args.rotations, rots.to_csv())
    return EXIT_OK


def cmd_stylize(args):
    from .errors import DataError
    from .guidance import ExternalGuidance
    from .mesh import load_obj, save_obj
    from .operators import build_operators
    from .style import NormalMatchLoss, OptimizeConfig, VertexMatchLoss, cubify_targets, field_targets, optimize, trace_to_csv

    mesh = load_obj(args.mesh)
    ops = build_operators(mesh)
    if args.driver == "cubify":
        source = NormalMatchLoss(mesh.faces, cubify_targets(mesh), ops.vertex_masses, name="cubify")
    elif args.driver == "field":
        source = NormalMatchLoss(mesh.faces, field_targets(mesh, _field_table(args.field)), ops.vertex_masses, name="field")
    elif args.driver == "vertex-match":
        if not args.target:
            raise DataError("--target is required for the vertex-match driver")
        target = load_obj(args.target)
        if target.n_vertices != mesh.n_vertices:
            raise DataError(f"target has {target.n_vertices} vertices, mesh has {mesh.n_vertices}")
        source = VertexMatchLoss(target.vertices)
    else:
        if not args.external_cmd:
            raise DataError("--external-cmd is required for the external driver")
        source = ExternalGuidance(args.external_cmd, timeout=args.timeout)
    cfg = OptimizeConfig(
        lam=args.lam,
        learning_rate=args.lr,
        epochs=args.epochs,
        mask=_load_mask(args, mesh.n_vertices),
        seed=args.seed,
        updates_per_epoch=args.updates_per_epoch,
        restore_bbox=args.restore_bbox,
    )

    def progress(epoch, fw, g):
        if epoch % 100 == 0 or epoch == cfg.epochs:
            log.info("epoch %d", epoch)

    res = optimize(mesh, ops, [source], cfg, callback=progress)
    save_obj(res.mesh, args.out)
    if args.save_normals:
        res.targets.save(args.save_normals)
    if args.trace:
        _write_text(args.trace, trace_to_csv(res.trace))
    losses = res.losses()
    print(f"loss initial={losses[0]:.6g} final={losses[-1]:.6g}")
    return EXIT_OK


def cmd_retarget(args):
    from .core import TargetNormals, retarget_lambda
    from .mesh import load_obj, save_obj
    from .operators import build_operators

    mesh = load_obj(args.mesh)
    saved = TargetNormals.load(args.normals, mesh.n_vertices)
    out = retarget_lambda(mesh, build_operators(mesh), saved, args.lam, _load_mask(args, mesh.n_vertices), args.restore_bbox)
    save_obj(out, args.out)
    return EXIT_OK


def cmd_metrics(args):
    from .mesh import load_obj
    from .metrics import area_ratio_stats, axis_deviation, displacement_stats, normalized_pair

    if args.metric == "axis-deviation":
        print(f"axis_deviation={axis_deviation(load_obj(args.mesh)):.6f}")
        return EXIT_OK
    source, deformed = load_obj(args.source), load_obj(args.deformed)
    if args.metric == "displacement":
        mean, mx, _ = displacement_stats(source, deformed)
        print(f"mean={mean:.6g} max={mx:.6g}")
        return EXIT_OK
    stats = area_ratio_stats(*normalized_pair(source, deformed))
    print(f"mean={stats.mean:.6f} std={stats.std_dev:.6f}")
    if args.csv:
        _write_text(args.csv, stats.stats_csv())
    if args.histogram:
        _write_text(args.histogram, stats.histogram_csv())
    return EXIT_OK


def cmd_bench(args):
    from .bench import bench_backends, bench_solves

    mesh = _bench_mesh(args.mesh)
    mesh_id = os.path.basename(args.mesh)
    run = bench_backends if args.backends else bench_solves
    report = run(mesh, max(args.repeats, 3), mesh_id)
    print(report.summary())
    if args.csv:
        _write_text(args.csv, report.to_csv())
    return EXIT_OK


def cmd_check(args):
    from .mesh import load_obj, validate

    report = validate(load_obj(args.mesh))
    sys.stdout.write(report.to_csv() if args.csv else report.to_text())
    return EXIT_OK if report.ok else EXIT_DATA


COMMANDS = {
    "deform": cmd_deform,
    "stylize": cmd_stylize,
    "retarget": cmd_retarget,
    "metrics": cmd_metrics,
    "bench": cmd_bench,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads:
        # only effective for libraries not yet initialized in this process
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    import numpy as np

    from .errors import DarapError

    try:
        return COMMANDS[args.command](args)
    except DarapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
