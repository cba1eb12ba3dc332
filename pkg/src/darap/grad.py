"""Reverse-mode gradients of losses on deformed vertices with respect to target normals."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import kernels
from .core import DeformConfig, ForwardResult, LocalStepCache, deform_forward, _target_values
from .errors import DataError, MissingCacheError
from .operators import SurfaceOperators

SVD_EPS_REL = 1e-8


def vjp_global(operators: SurfaceOperators, upstream: np.ndarray) -> np.ndarray:
    """Pull a gradient on the global-step output back onto its right-hand side.

    The pinned Laplacian is symmetric, so this is one more solve against the
    same factor after undoing the centroid translation.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise DataError("upstream gradient must be finite")
    return operators.solver.solve(operators.align_centroid_adjoint(g))


def restore_bbox_adjoint(solved: np.ndarray, diagonal: float, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of the rescale-about-bbox-center map; ties go to the first extreme vertex."""
    lo_i = np.argmin(solved, axis=0)
    hi_i = np.argmax(solved, axis=0)
    lo = solved[lo_i, [0, 1, 2]]
    hi = solved[hi_i, [0, 1, 2]]
    delta = hi - lo
    d2 = float(delta @ delta)
    s = diagonal / np.sqrt(d2)
    center = (lo + hi) / 2.0
    g = upstream
    out = s * g
    gs = float(np.sum(g * (solved - center)))
    gc = (1.0 - s) * g.sum(axis=0)
    ds_dhi = -s * delta / d2
    for d in range(3):
        out[hi_i[d], d] += gs * ds_dhi[d] + 0.5 * gc[d]
        out[lo_i[d], d] += -gs * ds_dhi[d] + 0.5 * gc[d]
    return out


def procrustes_dx(cache: LocalStepCache, dR_active: np.ndarray, backend=None) -> np.ndarray:
    """``dL/dX`` for the active vertices given ``dL/dR`` on them."""
    kern = kernels.get(backend) if isinstance(backend, (str, type(None))) else backend
    R = np.ascontiguousarray(cache.rotations[cache.active])
    return kern.procrustes_vjp(R, cache.U, cache.sigma, cache.flipped, np.ascontiguousarray(dR_active), SVD_EPS_REL)


def vjp_procrustes(cache: LocalStepCache, dR: np.ndarray, backend=None) -> np.ndarray:
    """Gradient on the unit targets of the active vertices, ``(n_active, 3)``.

    ``X = C + w u t^T`` is linear in the unit target ``t``, so
    ``dL/dt = w dX^T u``.
    """
    dR = np.asarray(dR, dtype=np.float64)
    if dR.shape[0] == len(cache.rotations):
        dR = dR[cache.active]
    dX = procrustes_dx(cache, dR, backend)
    return cache.weight[:, None] * np.einsum("kab,ka->kb", dX, cache.source_normals)


def vjp_deform(forward: ForwardResult, upstream: np.ndarray) -> np.ndarray:
    """``dLoss/d(raw targets)`` given ``dLoss/d(deformed vertices)``.

    Masked-out vertices receive exactly zero.
    """
    lc = forward.local
    if lc is None:
        raise MissingCacheError("forward pass was run without caching")
    ops = forward.operators
    g = np.array(upstream, dtype=np.float64)
    if g.shape != (ops.n_vertices, 3):
        raise DataError(f"upstream gradient must have shape ({ops.n_vertices}, 3), got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise DataError("upstream gradient must be finite")
    if forward.config.restore_bbox:
        g = restore_bbox_adjoint(forward.solved, forward.source_diagonal, g)
    d_rhs = vjp_global(ops, g)
    kern = kernels.get(forward.backend) if isinstance(forward.backend, (str, type(None))) else forward.backend
    dR = kern.rhs_adjoint(np.ascontiguousarray(ops.mesh.faces), ops.rhs_coeff, np.ascontiguousarray(d_rhs), ops.n_vertices)
    du = vjp_procrustes(lc, dR[lc.active], forward.backend)
    # through t = raw / |raw|
    unit = lc.unit_targets[lc.active]
    radial = np.einsum("ka,ka->k", unit, du)
    dt = (du - radial[:, None] * unit) / lc.target_norms[lc.active][:, None]
    out = np.zeros_like(lc.raw_targets)
    out[lc.active] = dt
    return out


def fd_gradient(
    mesh,
    operators: SurfaceOperators,
    targets,
    config: DeformConfig,
    loss: Callable[[np.ndarray], float],
    h: float = 1e-4,
) -> np.ndarray:
    """Central differences of ``loss(deformed vertices)`` over every target component."""
    if not h > 0:
        raise ValueError("step must be positive")
    t0 = np.array(_target_values(targets), dtype=np.float64)
    out = np.zeros_like(t0)
    for k in range(t0.shape[0]):
        for d in range(3):
            t = t0.copy()
            t[k, d] += h
            fp = loss(deform_forward(mesh, operators, t, config, cache=False).vertices)
            t[k, d] -= 2 * h
            fm = loss(deform_forward(mesh, operators, t, config, cache=False).vertices)
            out[k, d] = (fp - fm) / (2 * h)
    return out


def fd_directional(mesh, operators, targets, config, loss, direction, h: float = 1e-4) -> float:
    """Central difference of ``loss`` along one direction in target space."""
    t0 = np.array(_target_values(targets), dtype=np.float64)
    fp = loss(deform_forward(mesh, operators, t0 + h * direction, config, cache=False).vertices)
    fm = loss(deform_forward(mesh, operators, t0 - h * direction, config, cache=False).vertices)
    return (fp - fm) / (2 * h)
