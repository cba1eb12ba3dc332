"""The differentiable ARAP layer: one Procrustes local step, one Poisson global step.

Conventions: ``L`` is the positive semidefinite cotangent Laplacian and the
right-hand side carries the matching sign, so identity rotations give
``rhs = L V`` and the global step returns the source mesh.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import DataError
from .mesh import Mesh, rescale_to_diagonal
from .operators import GradientOperators, SurfaceOperators, _rhs_coefficients

TARGET_NORM_MIN = 1e-12
ORTHO_TOL = 1e-8


# ---------------------------------------------------------------- types


@dataclass(frozen=True, eq=False)
class TargetNormals:
    """Per-vertex target vectors, unconstrained; normalized where used."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise DataError(f"target normals must have shape (V, 3), got {v.shape}")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def to_csv(self) -> str:
        return "".join(f"{x:.17g},{y:.17g},{z:.17g}\n" for x, y, z in self.values)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, n_vertices: Optional[int] = None) -> "TargetNormals":
        rows = []
        for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"normals line {lineno}: expected 3 values, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise DataError(f"normals line {lineno}: not a number") from None
        if n_vertices is not None and len(rows) != n_vertices:
            raise DataError(f"normals file has {len(rows)} rows, mesh has {n_vertices} vertices")
        if not rows:
            raise DataError("normals file is empty")
        return cls(np.asarray(rows))

    @classmethod
    def load(cls, path, n_vertices: Optional[int] = None) -> "TargetNormals":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_csv(fh.read(), n_vertices)


def _target_values(targets) -> np.ndarray:
    if isinstance(targets, TargetNormals):
        return targets.values
    return TargetNormals(targets).values


@dataclass(frozen=True, eq=False)
class RotationField:
    rotations: np.ndarray  # (V, 3, 3)

    def __len__(self):
        return len(self.rotations)

    def orthogonality_error(self) -> np.ndarray:
        R = self.rotations
        return np.linalg.norm(R.transpose(0, 2, 1) @ R - np.eye(3), axis=(1, 2))

    def check(self, tol: float = ORTHO_TOL) -> None:
        err = self.orthogonality_error()
        det = np.linalg.det(self.rotations)
        if np.any(err >= tol) or np.any(det <= 0):
            bad = int(np.flatnonzero((err >= tol) | (det <= 0))[0])
            raise ValueError(f"rotation {bad} is not in SO(3) (ortho err {err[bad]:.2e}, det {det[bad]:.3f})")

    def to_csv(self) -> str:
        return "".join(",".join(f"{x:.17g}" for x in r) + "\n" for r in self.rotations.reshape(-1, 9))


def load_mask(path, n_vertices: int) -> np.ndarray:
    """Mask file: one ``0``/``1`` per line."""
    vals = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s not in ("0", "1"):
                raise DataError(f"mask line {lineno}: expected 0 or 1, got {s!r}")
            vals.append(s == "1")
    if len(vals) != n_vertices:
        raise DataError(f"mask has {len(vals)} rows, mesh has {n_vertices} vertices")
    return np.asarray(vals, dtype=bool)


@dataclass(frozen=True)
class DeformConfig:
    """``lam`` scales the normal term; ``mask`` marks the stylized region (True)."""

    lam: float = 8.0
    mask: Optional[np.ndarray] = None
    centroid_target: Optional[np.ndarray] = None
    restore_bbox: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise DataError(f"lambda must be nonnegative, got {self.lam}")
        if self.mask is not None:
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    def active(self, n_vertices: int) -> np.ndarray:
        if self.mask is None:
            return np.ones(n_vertices, dtype=bool)
        if self.mask.shape != (n_vertices,):
            raise DataError(f"mask has {self.mask.shape[0]} entries, mesh has {n_vertices} vertices")
        return self.mask


# ---------------------------------------------------------------- local step


@dataclass(eq=False)
class LocalStepCache:
    """Everything the backward pass needs from one local step."""

    rotations: np.ndarray  # (V, 3, 3), identity where inactive
    active: np.ndarray  # (V,) bool
    raw_targets: np.ndarray
    unit_targets: np.ndarray
    target_norms: np.ndarray
    U: np.ndarray  # (n_active, 3, 3) left singular vectors, last column flipped where needed
    sigma: np.ndarray  # (n_active, 3)
    flipped: np.ndarray  # (n_active,) uint8
    weight: np.ndarray  # (n_active,) lambda * a_k
    source_normals: np.ndarray  # (n_active, 3)


def normalize_targets(values: np.ndarray, active: Optional[np.ndarray] = None):
    if not np.all(np.isfinite(values)):
        raise DataError("target normals must be finite")
    norms = np.linalg.norm(values, axis=1)
    check = norms if active is None else norms[active]
    if np.any(check <= TARGET_NORM_MIN):
        idx = np.flatnonzero(norms <= TARGET_NORM_MIN)
        if active is not None:
            idx = idx[active[idx]]
        raise DataError(f"target normal {int(idx[0])} has (near-)zero length")
    safe = np.where(norms > TARGET_NORM_MIN, norms, 1.0)
    return values / safe[:, None], norms


def local_step_cached(
    operators: SurfaceOperators,
    source_normals: np.ndarray,
    targets,
    config: DeformConfig,
    backend=None,
) -> LocalStepCache:
    kern = kernels.get(backend) if isinstance(backend, (str, type(None))) else backend
    raw = _target_values(targets)
    V = operators.n_vertices
    if len(raw) != V:
        raise DataError(f"got {len(raw)} target normals for {V} vertices")
    active = config.active(V)
    unit, norms = normalize_targets(raw, active)
    idx = np.flatnonzero(active)
    u = np.ascontiguousarray(source_normals[idx], dtype=np.float64)
    wt = np.ascontiguousarray(config.lam * operators.vertex_masses[idx])
    C = np.ascontiguousarray(operators.edge_covariance[idx])
    R_act, U, sigma, flipped = kern.procrustes(C, u, np.ascontiguousarray(unit[idx]), wt)
    R = np.broadcast_to(np.eye(3), (V, 3, 3)).copy()
    R[idx] = R_act
    return LocalStepCache(R, active, raw, unit, norms, U, sigma, flipped, wt, u)


def local_step(operators: SurfaceOperators, source_normals, targets, config: DeformConfig, backend=None) -> RotationField:
    """Per-vertex best-fit rotation of the spokes-and-rims bundle plus the normal.

    Maximizes ``tr(R X_k)`` with ``X_k = sum w e e^T + lam a_k u_k t_k^T``;
    vertices outside ``config.mask`` get the identity.
    """
    return RotationField(local_step_cached(operators, source_normals, targets, config, backend).rotations)


def local_energy(operators: SurfaceOperators, rotations: np.ndarray, targets, lam: float, vertices=None) -> np.ndarray:
    """Per-vertex local objective evaluated edge by edge (independent of the covariance path)."""
    idx = np.arange(operators.n_vertices) if vertices is None else np.asarray(vertices)
    R = np.asarray(rotations)
    if R.ndim == 2:
        R = np.broadcast_to(R, (len(idx), 3, 3))
    unit, _ = normalize_targets(_target_values(targets)[idx])
    v = operators.mesh.vertices
    nb = operators.neighborhoods[idx]
    valid = nb >= 0
    e_id = np.where(valid, nb, 0)
    e = v[operators.edges[e_id, 1]] - v[operators.edges[e_id, 0]]
    w = np.where(valid, operators.edge_weights[e_id], 0.0)
    Re = np.einsum("kab,knb->kna", R, e)
    edge_term = np.einsum("kn,kn->k", w, np.sum((Re - e) ** 2, axis=2))
    u = operators.source_normals[idx]
    Ru = np.einsum("kab,kb->ka", R, u)
    return edge_term + lam * operators.vertex_masses[idx] * np.sum((Ru - unit) ** 2, axis=1)


def local_step_direct(params) -> RotationField:
    """Rotations from a continuous 3x2 parametrization by Gram-Schmidt."""
    p = np.asarray(params, dtype=np.float64)
    if p.ndim == 2:
        p = p[None]
    if p.shape[1:] != (3, 2):
        raise DataError(f"expected (V, 3, 2) parameters, got {p.shape}")
    a, b = p[:, :, 0], p[:, :, 1]
    na = np.linalg.norm(a, axis=1)
    if np.any(na <= TARGET_NORM_MIN):
        raise DataError("first column has zero length")
    c1 = a / na[:, None]
    b_perp = b - np.einsum("ki,ki->k", c1, b)[:, None] * c1
    nb = np.linalg.norm(b_perp, axis=1)
    if np.any(nb <= TARGET_NORM_MIN * np.maximum(1.0, np.linalg.norm(b, axis=1))):
        raise DataError("columns are collinear")
    c2 = b_perp / nb[:, None]
    c3 = np.cross(c1, c2)
    return RotationField(np.stack([c1, c2, c3], axis=2))


# ---------------------------------------------------------------- global step


def assemble_rhs(operators: SurfaceOperators, mesh: Optional[Mesh], rotations, backend=None) -> np.ndarray:
    """Right-hand side of the global Poisson solve.

    Each face ``(k, m, n)`` adds ``Rbar (w_km/2 (v_k - v_m) + w_kn/2 (v_k - v_n))``
    to vertex ``k``, with ``Rbar`` the mean of the three vertex rotations and
    edge vectors taken on the source mesh. Boundary edges, shared by one face
    only, take their full weight.
    """
    R = rotations.rotations if isinstance(rotations, RotationField) else np.asarray(rotations, dtype=np.float64)
    if len(R) != operators.n_vertices:
        raise DataError(f"got {len(R)} rotations for {operators.n_vertices} vertices")
    if mesh is None or mesh is operators.mesh:
        coeff = operators.rhs_coeff
        faces = operators.mesh.faces
    else:
        coeff = _rhs_coefficients(mesh, operators.edges, operators.edge_weights, operators.edge_face_count, operators.face_edge)
        faces = mesh.faces
    kern = kernels.get(backend) if isinstance(backend, (str, type(None))) else backend
    return kern.assemble_rhs(np.ascontiguousarray(faces), coeff, np.ascontiguousarray(R), operators.n_vertices)


def global_step(operators: SurfaceOperators, rhs: np.ndarray, centroid_target=None) -> np.ndarray:
    """Solve ``L V = rhs`` with the pinned factorization, then fix the translation."""
    rhs = np.asarray(rhs, dtype=np.float64)
    if not np.all(np.isfinite(rhs)):
        raise DataError("rhs must be finite")
    x = operators.solver.solve(rhs)
    return operators.align_centroid(x, centroid_target)


def njf_poisson(mesh: Mesh, grad_ops: GradientOperators, operators: SurfaceOperators, jacobians, centroid_target=None) -> np.ndarray:
    """Least-squares vertices for per-face jacobians: ``L Phi = G^T A M``."""
    M = np.asarray(jacobians, dtype=np.float64)
    if M.shape != (mesh.n_faces, 3, 3):
        raise DataError(f"expected ({mesh.n_faces}, 3, 3) jacobians, got {M.shape}")
    # row 3f+b, column a holds d(phi_a)/d(x_b) on face f
    stacked = M.transpose(0, 2, 1).reshape(-1, 3)
    rhs = grad_ops.gradient.T @ (np.repeat(grad_ops.face_mass, 3)[:, None] * stacked)
    return global_step(operators, rhs, centroid_target)


@dataclass(frozen=True)
class NJFSystem:
    """NJF right-hand side operator ``G^T A`` folded into one sparse matrix."""

    rhs_operator: object  # (V, 3F) sparse

    @classmethod
    def build(cls, grad_ops: GradientOperators):
        import scipy.sparse as sp

        G = grad_ops.gradient
        return cls((G.T @ sp.diags(np.repeat(grad_ops.face_mass, 3))).tocsr())

    def solve(self, operators: SurfaceOperators, jacobians, centroid_target=None) -> np.ndarray:
        M = np.asarray(jacobians, dtype=np.float64)
        stacked = M.transpose(0, 2, 1).reshape(-1, 3)
        return global_step(operators, self.rhs_operator @ stacked, centroid_target)


# ---------------------------------------------------------------- full layer


@dataclass(eq=False)
class ForwardResult:
    """Output of one forward pass, holding the cache for ``vjp_deform``."""

    mesh: Mesh
    rotations: RotationField
    solved: np.ndarray  # vertices after the global step, before any bbox restore
    config: DeformConfig
    operators: SurfaceOperators
    local: Optional[LocalStepCache] = None
    backend: Optional[str] = None
    source_diagonal: float = 0.0

    @property
    def vertices(self) -> np.ndarray:
        return self.mesh.vertices


def deform_forward(
    mesh: Mesh,
    operators: SurfaceOperators,
    targets,
    config: DeformConfig = DeformConfig(),
    cache: bool = True,
    backend=None,
) -> ForwardResult:
    if mesh.n_vertices != operators.n_vertices:
        raise DataError("mesh and operators disagree on vertex count")
    lc = local_step_cached(operators, operators.source_normals, targets, config, backend)
    rhs = assemble_rhs(operators, None, lc.rotations, backend)
    solved = global_step(operators, rhs, config.centroid_target)
    out = solved
    diag = mesh.bbox_diagonal()
    if config.restore_bbox:
        out = rescale_to_diagonal(solved, diag)
    return ForwardResult(
        mesh=mesh.with_vertices(out),
        rotations=RotationField(lc.rotations),
        solved=solved,
        config=config,
        operators=operators,
        local=lc if cache else None,
        backend=backend,
        source_diagonal=diag,
    )


def deform(mesh: Mesh, operators: SurfaceOperators, targets, config: DeformConfig = DeformConfig(), backend=None):
    """One local step then one global step. Returns ``(deformed mesh, rotations)``."""
    res = deform_forward(mesh, operators, targets, config, cache=False, backend=backend)
    return res.mesh, res.rotations


def retarget_lambda(
    mesh: Mesh,
    operators: SurfaceOperators,
    saved_targets,
    new_lambda: float,
    mask=None,
    restore_bbox: bool = False,
) -> Mesh:
    """Re-apply saved target normals at a different strength; nothing is re-optimized."""
    cfg = DeformConfig(lam=float(new_lambda), mask=mask, restore_bbox=restore_bbox)
    return deform(mesh, operators, saved_targets, cfg)[0]


def normal_alignment_angles(operators: SurfaceOperators, rotations, targets) -> np.ndarray:
    """Angle between the rotated source normal and the unit target, per vertex."""
    R = rotations.rotations if isinstance(rotations, RotationField) else np.asarray(rotations)
    unit, _ = normalize_targets(_target_values(targets))
    Ru = np.einsum("kab,kb->ka", R, operators.source_normals)
    cos = np.clip(np.einsum("ka,ka->k", Ru, unit) / np.linalg.norm(Ru, axis=1), -1.0, 1.0)
    return np.arccos(cos)
