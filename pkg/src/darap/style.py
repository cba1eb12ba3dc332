"""Target-normal optimization: style targets, gradient sources, schedules and the descent loop."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import DeformConfig, ForwardResult, TargetNormals, deform_forward
from .errors import DataError, GuidanceError
from .grad import vjp_deform
from .mesh import Mesh, face_cross, vertex_normals
from .operators import SurfaceOperators

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- targets


def axis_snap(normals: np.ndarray) -> np.ndarray:
    """Nearest signed coordinate axis; ties go x before y before z, zero counts as positive."""
    n = np.asarray(normals, dtype=np.float64)
    axis = np.argmax(np.abs(n), axis=1)
    comp = n[np.arange(len(n)), axis]
    out = np.zeros_like(n)
    out[np.arange(len(n)), axis] = np.where(comp < 0, -1.0, 1.0)
    return out


def cubify_targets(mesh: Mesh) -> TargetNormals:
    return TargetNormals(axis_snap(vertex_normals(mesh)))


@dataclass(eq=False)
class SphereTable:
    """Direction-to-direction lookup over a spherical triangulation.

    ``constant`` mode holds one value per triangle; ``linear`` mode holds one
    value per triangulation vertex and blends them with the query's cone
    coordinates. The first containing triangle wins on shared boundaries.
    """

    directions: np.ndarray  # (P, 3) unit vectors
    triangles: np.ndarray  # (T, 3)
    values: np.ndarray
    mode: str = "constant"
    tol: float = 1e-12

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = len(self.triangles) if self.mode == "constant" else len(self.directions)
        if self.mode not in ("constant", "linear"):
            raise ValueError(f"unknown table mode {self.mode!r}")
        if self.values.shape != (expected, 3):
            raise DataError(f"table values must have shape ({expected}, 3)")
        M = self.directions[self.triangles].transpose(0, 2, 1)  # columns are the corners
        self._inv = np.linalg.inv(M)

    def lookup(self, u: np.ndarray, chunk: int = 4096) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        out = np.empty_like(u)
        for s in range(0, len(u), chunk):
            q = u[s : s + chunk]
            beta = np.einsum("tij,nj->nti", self._inv, q)  # (n, T, 3)
            inside = np.all(beta >= -self.tol, axis=2)
            hit = inside.any(axis=1)
            if not np.all(hit):
                bad = s + int(np.flatnonzero(~hit)[0])
                raise DataError(f"table gap: direction {bad} is not covered")
            tri = np.argmax(inside, axis=1)
            if self.mode == "constant":
                out[s : s + chunk] = self.values[tri]
            else:
                b = beta[np.arange(len(q)), tri]
                corners = self.values[self.triangles[tri]]  # (n, 3, 3)
                v = np.einsum("ni,nij->nj", b, corners)
                out[s : s + chunk] = v / np.linalg.norm(v, axis=1, keepdims=True)
        return out

    @classmethod
    def axis_snap(cls) -> "SphereTable":
        """Cube-face regions, ordered +x, -x, +y, -y, +z, -z to reproduce the snap tie rule."""
        dirs, tris, vals = [], [], []
        for axis in range(3):
            for sign in (1.0, -1.0):
                u, w = [a for a in range(3) if a != axis]
                quad = []
                for s, t in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                    p = np.zeros(3)
                    p[axis], p[u], p[w] = sign, s, t
                    quad.append(p / np.sqrt(3.0))
                base = len(dirs)
                dirs.extend(quad)
                tris += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
                n = np.zeros(3)
                n[axis] = sign
                vals += [n, n]
        return cls(np.asarray(dirs), np.asarray(tris), np.asarray(vals), "constant")

    @classmethod
    def identity(cls, subdivisions: int = 1) -> "SphereTable":
        from .shapes import icosphere

        s = icosphere(subdivisions)
        return cls(s.vertices, s.faces, s.vertices.copy(), "linear")

    @classmethod
    def constant(cls, direction, subdivisions: int = 0) -> "SphereTable":
        from .shapes import icosphere

        s = icosphere(subdivisions)
        d = np.asarray(direction, dtype=np.float64)
        return cls(s.vertices, s.faces, np.tile(d / np.linalg.norm(d), (s.n_faces, 1)), "constant")


def field_targets(mesh: Mesh, table: SphereTable) -> TargetNormals:
    return TargetNormals(table.lookup(vertex_normals(mesh)))


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class Ramp:
    start_epoch: int
    end_epoch: int
    start_weight: float
    end_weight: float

    def at(self, epoch: float) -> float:
        if self.end_epoch == self.start_epoch:
            return self.end_weight
        s = (epoch - self.start_epoch) / (self.end_epoch - self.start_epoch)
        return self.start_weight + s * (self.end_weight - self.start_weight)


@dataclass
class GuidanceSchedule:
    """Per-source piecewise-linear weights over epochs, held constant outside the ramps."""

    sources: Dict[str, List[Ramp]] = field(default_factory=dict)

    def __post_init__(self):
        for name, segs in self.sources.items():
            segs = [s if isinstance(s, Ramp) else Ramp(*s) for s in segs]
            if not segs:
                raise DataError(f"source {name!r} has no weight segments")
            for s in segs:
                if s.end_epoch < s.start_epoch:
                    raise DataError(f"source {name!r}: segment ends before it starts")
            for a, b in zip(segs, segs[1:]):
                if b.start_epoch < a.end_epoch:
                    raise DataError(f"source {name!r}: overlapping or unordered segments")
                if not np.isclose(a.end_weight, b.start_weight, rtol=0, atol=1e-15):
                    raise DataError(f"source {name!r}: weight jumps at epoch {b.start_epoch}")
            self.sources[name] = segs

    @classmethod
    def constant(cls, **weights: float) -> "GuidanceSchedule":
        return cls({name: [Ramp(0, 0, w, w)] for name, w in weights.items()})

    def add(self, name: str, segments: Sequence) -> "GuidanceSchedule":
        merged = dict(self.sources)
        merged[name] = list(segments)
        return GuidanceSchedule(merged)

    def weight(self, name: str, epoch: float) -> float:
        if name not in self.sources:
            raise KeyError(f"no schedule for source {name!r}")
        segs = self.sources[name]
        if epoch <= segs[0].start_epoch:
            return segs[0].start_weight if segs[0].end_epoch > segs[0].start_epoch else segs[0].end_weight
        current = segs[0].start_weight
        for s in segs:
            if epoch < s.start_epoch:
                return current
            if epoch <= s.end_epoch:
                return s.at(epoch)
            current = s.end_weight
        return current


def schedule_weight(schedule: GuidanceSchedule, source: str, epoch: int) -> float:
    return schedule.weight(source, epoch)


def cascaded_ramp_schedule(primary: str = "sds", secondary: str = "csd2") -> GuidanceSchedule:
    """Primary at a constant 1.0; secondary ramps 0 -> 0.2 over 1000 epochs, 0.2 -> 0.3 over 750, then holds."""
    return GuidanceSchedule(
        {
            primary: [Ramp(0, 0, 1.0, 1.0)],
            secondary: [Ramp(0, 1000, 0.0, 0.2), Ramp(1000, 1750, 0.2, 0.3)],
        }
    )


def combine_gradients(grads: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    if len(grads) != len(weights) or not grads:
        raise DataError("need one weight per gradient and at least one gradient")
    shape = np.shape(grads[0])
    out = np.zeros(shape)
    for g, w in zip(grads, weights):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != shape:
            raise DataError(f"gradient shapes differ: {g.shape} vs {shape}")
        out += w * g
    return out


# ---------------------------------------------------------------- sources


class GuidanceSource:
    """Anything returning ``(loss, dLoss/dVertices)`` for the current deformed vertices."""

    name = "source"

    def start(self, mesh: Mesh, meta: dict) -> None:
        pass

    def __call__(self, epoch: int, vertices: np.ndarray) -> Tuple[float, np.ndarray]:
        raise NotImplementedError

    def close(self) -> None:
        pass


class VertexMatchLoss(GuidanceSource):
    """``0.5 * sum |V - T|^2``.

    Residual entries within a few ulps of the target's diagonal count as zero.
    Adam rescales any nonzero gradient to a step of roughly ``lr``, so without the
    floor the solver's round-off alone walks the optimum away from the identity.
    """

    ROUNDOFF_ULPS = 64

    def __init__(self, target_vertices, name: str = "vertex-match"):
        self.target = np.asarray(target_vertices, dtype=np.float64)
        self.name = name
        span = np.ptp(self.target, axis=0) if len(self.target) else np.zeros(3)
        self.floor = self.ROUNDOFF_ULPS * np.finfo(np.float64).eps * float(np.linalg.norm(span))

    def __call__(self, epoch, vertices):
        diff = vertices - self.target
        diff[np.abs(diff) <= self.floor] = 0.0
        return float(0.5 * np.sum(diff * diff)), diff


def normal_match_loss(vertices, faces, targets, weights):
    """``0.5 * sum_k a_k |n_k(V) - t_k|^2`` with area-weighted vertex normals, and its gradient."""
    V = len(vertices)
    cross = face_cross(vertices, faces)
    m = np.stack([np.bincount(faces.ravel(), weights=np.repeat(cross[:, d], 3), minlength=V) for d in range(3)], axis=1)
    norm = np.linalg.norm(m, axis=1)
    n = m / norm[:, None]
    diff = n - targets
    loss = 0.5 * float(np.sum(weights * np.sum(diff * diff, axis=1)))
    gn = weights[:, None] * diff
    gm = (gn - n * np.einsum("ka,ka->k", n, gn)[:, None]) / norm[:, None]
    q = gm[faces[:, 0]] + gm[faces[:, 1]] + gm[faces[:, 2]]
    a = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    b = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    ga = np.cross(b, q)
    gb = np.cross(q, a)
    grad = np.zeros_like(vertices)
    for d in range(3):
        grad[:, d] = (
            np.bincount(faces[:, 1], weights=ga[:, d], minlength=V)
            + np.bincount(faces[:, 2], weights=gb[:, d], minlength=V)
            - np.bincount(faces[:, 0], weights=ga[:, d] + gb[:, d], minlength=V)
        )
    return loss, grad


class NormalMatchLoss(GuidanceSource):
    """Mass-weighted squared distance between deformed vertex normals and a target field."""

    def __init__(self, faces, target_normals, weights, name: str = "normal-match"):
        self.faces = np.asarray(faces)
        t = np.asarray(target_normals.values if isinstance(target_normals, TargetNormals) else target_normals, dtype=np.float64)
        self.targets = t / np.linalg.norm(t, axis=1, keepdims=True)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.name = name

    def __call__(self, epoch, vertices):
        return normal_match_loss(vertices, self.faces, self.targets, self.weights)


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, shape, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class OptimizeConfig:
    lam: float = 8.0
    learning_rate: float = 0.002
    epochs: int = 2500
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    mask: Optional[np.ndarray] = None
    seed: int = 0
    updates_per_epoch: int = 1
    restore_bbox: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DataError("learning rate must be positive")
        if int(self.epochs) < 1:
            raise DataError("epochs must be at least 1")
        if int(self.updates_per_epoch) < 1:
            raise DataError("updates_per_epoch must be at least 1")

    def deform_config(self) -> DeformConfig:
        return DeformConfig(lam=self.lam, mask=self.mask, restore_bbox=self.restore_bbox)


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    source: str
    weight: float
    loss: float
    grad_norm: float


def trace_to_csv(rows: Sequence[TraceRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["epoch", "source", "weight", "loss", "grad_norm"])
    for r in rows:
        w.writerow([r.epoch, r.source, repr(float(r.weight)), repr(float(r.loss)), repr(float(r.grad_norm))])
    return out.getvalue()


@dataclass(eq=False)
class OptimizeResult:
    targets: TargetNormals
    mesh: Mesh
    trace: List[TraceRow]
    forward: ForwardResult

    def losses(self, source: str = "total") -> np.ndarray:
        return np.array([r.loss for r in self.trace if r.source == source])


def optimize(
    mesh: Mesh,
    operators: SurfaceOperators,
    sources: Sequence[GuidanceSource],
    config: OptimizeConfig = OptimizeConfig(),
    schedule: Optional[GuidanceSchedule] = None,
    callback: Optional[Callable[[int, ForwardResult, np.ndarray], None]] = None,
) -> OptimizeResult:
    """Gradient descent on the raw target vectors, starting from the source normals.

    Runs ``config.epochs`` update epochs; the trace also holds one final
    evaluation (epoch index ``config.epochs``) at the optimized targets.
    """
    if not sources:
        raise DataError("optimize needs at least one guidance source")
    names = [s.name for s in sources]
    if len(set(names)) != len(names):
        raise DataError(f"guidance source names must be unique, got {names}")
    schedule = schedule or GuidanceSchedule.constant(**{n: 1.0 for n in names})
    dcfg = config.deform_config()
    targets = operators.source_normals.copy()
    adam = Adam(targets.shape, config.learning_rate, config.betas, config.eps)
    trace: List[TraceRow] = []
    meta = {"lambda": float(config.lam), "seed": int(config.seed), "epochs": int(config.epochs)}
    started = []
    try:
        for src in sources:
            src.start(mesh, meta)
            started.append(src)
        fw = None
        for epoch in range(config.epochs + 1):
            fw = deform_forward(mesh, operators, targets, dcfg)
            grads, weights, total = [], [], 0.0
            for src in sources:
                w = schedule.weight(src.name, epoch)
                loss, g = src(epoch, fw.vertices)
                g = np.asarray(g, dtype=np.float64)
                if g.shape != fw.vertices.shape:
                    raise GuidanceError(f"gradient has shape {g.shape}, expected {fw.vertices.shape}", epoch, src.name)
                if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                    raise GuidanceError("non-finite loss or gradient", epoch, src.name)
                trace.append(TraceRow(epoch, src.name, w, float(loss), float(np.linalg.norm(g))))
                grads.append(g)
                weights.append(w)
                total += w * loss
            gv = combine_gradients(grads, weights)
            gt = vjp_deform(fw, gv)
            trace.append(TraceRow(epoch, "total", 1.0, total, float(np.linalg.norm(gt))))
            if callback is not None:
                callback(epoch, fw, gt)
            if epoch == config.epochs:
                break
            if not np.all(np.isfinite(gt)):
                raise GuidanceError("non-finite target gradient", epoch, "total")
            for _ in range(config.updates_per_epoch):
                targets = adam.step(targets, gt)
            if not np.all(np.isfinite(targets)):
                log.warning("targets diverged at epoch %d", epoch)
    finally:
        for src in started:
            src.close()
    return OptimizeResult(TargetNormals(targets), fw.mesh, trace, fw)
