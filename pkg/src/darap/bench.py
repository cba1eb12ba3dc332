"""Solve-time benchmarks: dARAP local/global steps against the NJF Poisson solve, and kernel backends."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import kernels
from .core import DeformConfig, NJFSystem, assemble_rhs, global_step, local_step
from .mesh import Mesh
from .operators import SurfaceOperators, build_gradient_ops, build_operators


@dataclass
class StageTiming:
    mean: float
    min: float
    std: float
    median_of_means: float
    samples: List[float] = field(repr=False, default_factory=list)

    @classmethod
    def from_samples(cls, samples, groups: int = 3) -> "StageTiming":
        s = np.asarray(samples, dtype=np.float64)
        chunks = np.array_split(s, min(groups, len(s)))
        mom = float(np.median([c.mean() for c in chunks]))
        return cls(float(s.mean()), float(s.min()), float(s.std()), mom, list(s))


@dataclass
class BenchReport:
    mesh_id: str
    n_vertices: int
    n_faces: int
    repeats: int
    stages: Dict[str, StageTiming]
    checksum: float = 0.0
    precomputation_excluded: bool = True

    def to_csv(self, header: bool = True) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        if header:
            w.writerow(["mesh", "V", "F", "stage", "mean_s", "min_s", "std_s", "repeats"])
        for name, t in self.stages.items():
            w.writerow([self.mesh_id, self.n_vertices, self.n_faces, name, f"{t.mean:.6e}", f"{t.min:.6e}", f"{t.std:.6e}", self.repeats])
        return out.getvalue()

    def summary(self) -> str:
        lines = [f"{self.mesh_id}: V={self.n_vertices} F={self.n_faces} F/V={self.n_faces / self.n_vertices:.3f} repeats={self.repeats}"]
        for name, t in self.stages.items():
            lines.append(f"  {name:<22} mean {t.mean * 1e3:9.3f} ms  min {t.min * 1e3:9.3f} ms  std {t.std * 1e3:8.3f} ms")
        return "\n".join(lines)


def _clock(fn):
    t0 = time.perf_counter()
    out = fn()
    return time.perf_counter() - t0, out


def bench_solves(
    mesh: Mesh,
    repeats: int = 10,
    mesh_id: str = "mesh",
    operators: Optional[SurfaceOperators] = None,
    lam: float = 8.0,
    seed: int = 0,
    backend: Optional[str] = None,
) -> BenchReport:
    """Time the local step, the dARAP global step and the NJF solve on one mesh.

    Operators, factorization and the NJF right-hand-side operator are built
    before timing starts. Stages are interleaved within each repeat and one
    warm-up round is discarded.
    """
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    ops = operators if operators is not None else build_operators(mesh)
    njf = NJFSystem.build(build_gradient_ops(mesh))
    rng = np.random.default_rng(seed)
    targets = ops.source_normals + 0.3 * rng.standard_normal((mesh.n_vertices, 3))
    jac = np.eye(3) + 0.1 * rng.standard_normal((mesh.n_faces, 3, 3))
    cfg = DeformConfig(lam=lam)
    rots = local_step(ops, ops.source_normals, targets, cfg, backend).rotations

    stages = {
        "local_step": lambda: local_step(ops, ops.source_normals, targets, cfg, backend).rotations,
        "darap_global": lambda: global_step(ops, assemble_rhs(ops, None, rots, backend)),
        "njf_poisson": lambda: njf.solve(ops, jac),
    }
    samples = {k: [] for k in stages}
    checksum = 0.0
    for rep in range(repeats + 1):
        for name, fn in stages.items():
            dt, out = _clock(fn)
            if rep > 0:
                samples[name].append(dt)
            # keep the result observable so nothing is optimized away
            checksum += float(out.ravel()[rep % out.size])
    return BenchReport(
        mesh_id=mesh_id,
        n_vertices=mesh.n_vertices,
        n_faces=mesh.n_faces,
        repeats=repeats,
        stages={k: StageTiming.from_samples(v) for k, v in samples.items()},
        checksum=checksum,
    )


def bench_backends(mesh: Mesh, repeats: int = 10, mesh_id: str = "mesh", seed: int = 0) -> BenchReport:
    """Compare the compiled and NumPy kernels stage by stage on the same inputs."""
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    ops = build_operators(mesh)
    rng = np.random.default_rng(seed)
    targets = ops.source_normals + 0.3 * rng.standard_normal((mesh.n_vertices, 3))
    cfg = DeformConfig()
    from .core import deform_forward
    from .grad import vjp_deform

    upstream = rng.standard_normal((mesh.n_vertices, 3))
    stages = {}
    for name in kernels.available():
        fw = deform_forward(mesh, ops, targets, cfg, backend=name)
        rots = fw.rotations.rotations
        stages[f"local_step[{name}]"] = lambda name=name: local_step(ops, ops.source_normals, targets, cfg, name).rotations
        stages[f"assemble_rhs[{name}]"] = lambda name=name, rots=rots: assemble_rhs(ops, None, rots, name)
        stages[f"forward[{name}]"] = lambda name=name: deform_forward(mesh, ops, targets, cfg, backend=name).vertices
        stages[f"backward[{name}]"] = lambda fw=fw: vjp_deform(fw, upstream)
    samples = {k: [] for k in stages}
    checksum = 0.0
    for rep in range(repeats + 1):
        for name, fn in stages.items():
            dt, out = _clock(fn)
            if rep > 0:
                samples[name].append(dt)
            checksum += float(out.ravel()[rep % out.size])
    return BenchReport(mesh_id, mesh.n_vertices, mesh.n_faces, repeats, {k: StageTiming.from_samples(v) for k, v in samples.items()}, checksum)
