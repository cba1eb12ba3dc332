"""Pure NumPy implementation of the per-vertex / per-face kernels.

Same contract as the compiled ``_kernels`` extension; selected when the
extension is unavailable or ``DARAP_KERNELS=python``.
"""

import numpy as np

NAME = "python"


def _normalize_svd_signs(U, Vt):
    # flip each (u_i, v_i) pair so u_i's largest-magnitude entry is positive
    idx = np.argmax(np.abs(U), axis=1)
    picked = np.take_along_axis(U, idx[:, None, :], axis=1)[:, 0, :]
    sgn = np.where(picked < 0, -1.0, 1.0)
    U *= sgn[:, None, :]
    Vt *= sgn[:, :, None]


def procrustes(C, u, t, wt):
    """Best-fit rotations for ``X = C + wt * u t^T``.

    Returns ``(R, U, sigma, flipped)`` with ``R = V U^T`` after the
    determinant fix, ``U`` already carrying the last-column flip.
    """
    X = C + wt[:, None, None] * (u[:, :, None] * t[:, None, :])
    U, sigma, Vt = np.linalg.svd(X)
    _normalize_svd_signs(U, Vt)
    R = np.matmul(Vt.transpose(0, 2, 1), U.transpose(0, 2, 1))
    flipped = np.linalg.det(R) < 0
    if np.any(flipped):
        U[flipped, :, 2] *= -1.0
        R[flipped] = np.matmul(Vt[flipped].transpose(0, 2, 1), U[flipped].transpose(0, 2, 1))
    return R, U, sigma, flipped.astype(np.uint8)


def assemble_rhs(faces, coeff, R, n_vertices):
    Rbar = (R[faces[:, 0]] + R[faces[:, 1]] + R[faces[:, 2]]) / 3.0
    contrib = np.einsum("fab,fcb->fca", Rbar, coeff)
    idx = faces.ravel()
    flat = contrib.reshape(-1, 3)
    return np.stack([np.bincount(idx, weights=flat[:, d], minlength=n_vertices) for d in range(3)], axis=1)


def rhs_adjoint(faces, coeff, g, n_vertices):
    dRbar = np.einsum("fca,fcb->fab", g[faces], coeff) / 3.0
    flat = np.repeat(dRbar.reshape(-1, 9), 3, axis=0)
    idx = faces.ravel()
    out = np.stack([np.bincount(idx, weights=flat[:, k], minlength=n_vertices) for k in range(9)], axis=1)
    return out.reshape(n_vertices, 3, 3)


def procrustes_vjp(R, U, sigma, flipped, G, eps_rel):
    """Pull ``dL/dR`` back to ``dL/dX`` for ``R = polar rotation of X``."""
    s = sigma.copy()
    s[:, 2] = np.where(flipped.astype(bool), -s[:, 2], s[:, 2])
    Ut = U.transpose(0, 2, 1)
    B = Ut @ R.transpose(0, 2, 1) @ G @ U
    skew = 0.5 * (B - B.transpose(0, 2, 1))
    d = s[:, :, None] + s[:, None, :]
    eps = (eps_rel * sigma[:, 0])[:, None, None]
    Cp = skew * d / (d * d + eps * eps)
    P = U @ Cp @ Ut
    return -2.0 * P @ R.transpose(0, 2, 1)
