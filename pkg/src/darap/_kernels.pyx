# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-vertex / per-face kernels. Mirrors ``_kernels_py`` exactly in contract."""

import numpy as np

from libc.math cimport fabs, sqrt

NAME = "cython"


cdef inline double _det3(const double* a) noexcept nogil:
    # row-major 3x3
    return (a[0] * (a[4] * a[8] - a[5] * a[7])
            - a[1] * (a[3] * a[8] - a[5] * a[6])
            + a[2] * (a[3] * a[7] - a[4] * a[6]))


cdef inline void _v_ut(const double* vt, const double* u, double* out) noexcept nogil:
    # out = V U^T with V = vt^T, all row-major: out[a, b] = sum_i vt[i, a] * u[b, i]
    cdef int a, b
    for a in range(3):
        for b in range(3):
            out[3 * a + b] = vt[a] * u[3 * b] + vt[3 + a] * u[3 * b + 1] + vt[6 + a] * u[3 * b + 2]


cdef inline void _svd3(double* a, double* u, double* s, double* vt) noexcept nogil:
    """One-sided Jacobi SVD of a row-major 3x3 ``a`` (overwritten).

    Produces row-major ``u``, descending ``s`` and row-major ``vt`` with
    ``a = u diag(s) vt``. Columns of ``a`` are rotated until mutually
    orthogonal; their norms are the singular values.
    """
    cdef double v[9]
    cdef int i, j, p, q, sweep, r, rotated
    cdef double alpha, beta, gamma, zeta, t, c, sn, x, y, tmp, nrm
    cdef int order[3]
    cdef double col[3]
    for i in range(9):
        v[i] = 0.0
    v[0] = 1.0
    v[4] = 1.0
    v[8] = 1.0
    for sweep in range(12):
        rotated = 0
        for p in range(2):
            for q in range(p + 1, 3):
                alpha = a[p] * a[p] + a[3 + p] * a[3 + p] + a[6 + p] * a[6 + p]
                beta = a[q] * a[q] + a[3 + q] * a[3 + q] + a[6 + q] * a[6 + q]
                gamma = a[p] * a[q] + a[3 + p] * a[3 + q] + a[6 + p] * a[6 + q]
                if gamma == 0.0 or fabs(gamma) <= 1e-15 * sqrt(alpha * beta):
                    continue
                rotated = 1
                zeta = (beta - alpha) / (2.0 * gamma)
                t = 1.0 / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                if zeta < 0:
                    t = -t
                c = 1.0 / sqrt(1.0 + t * t)
                sn = c * t
                for r in range(3):
                    x = a[3 * r + p]
                    y = a[3 * r + q]
                    a[3 * r + p] = c * x - sn * y
                    a[3 * r + q] = sn * x + c * y
                    x = v[3 * r + p]
                    y = v[3 * r + q]
                    v[3 * r + p] = c * x - sn * y
                    v[3 * r + q] = sn * x + c * y
        if not rotated:
            break
    for i in range(3):
        col[i] = sqrt(a[i] * a[i] + a[3 + i] * a[3 + i] + a[6 + i] * a[6 + i])
        order[i] = i
    # sort descending (3 elements)
    for i in range(3):
        for j in range(2 - i):
            if col[order[j]] < col[order[j + 1]]:
                r = order[j]
                order[j] = order[j + 1]
                order[j + 1] = r
    for i in range(3):
        s[i] = col[order[i]]
        for r in range(3):
            vt[3 * i + r] = v[3 * r + order[i]]
    for i in range(2):
        if s[i] > 1e-300 and (i == 0 or s[i] > 1e-15 * s[0]):
            for r in range(3):
                u[3 * r + i] = a[3 * r + order[i]] / s[i]
        elif i == 1:
            # rank one: any unit vector orthogonal to the first column
            if fabs(u[0]) < 0.9:
                x, y, tmp = 0.0, -u[6], u[3]
            else:
                x, y, tmp = u[6], 0.0, -u[0]
            nrm = sqrt(x * x + y * y + tmp * tmp)
            u[1] = x / nrm
            u[4] = y / nrm
            u[7] = tmp / nrm
        else:
            u[0] = 1.0
            u[3] = 0.0
            u[6] = 0.0
    if s[2] > 1e-15 * s[0] and s[2] > 1e-300:
        for r in range(3):
            u[3 * r + 2] = a[3 * r + order[2]] / s[2]
    else:
        # null direction: complete the frame, sign settled later by the determinant fix
        u[2] = u[3] * u[7] - u[6] * u[4]
        u[5] = u[6] * u[1] - u[0] * u[7]
        u[8] = u[0] * u[4] - u[3] * u[1]


def procrustes(const double[:, :, ::1] C, const double[:, ::1] u, const double[:, ::1] t,
               const double[::1] wt):
    cdef Py_ssize_t n = C.shape[0]
    R_arr = np.empty((n, 3, 3))
    U_arr = np.empty((n, 3, 3))
    S_arr = np.empty((n, 3))
    F_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, :, ::1] R = R_arr
    cdef double[:, :, ::1] Uo = U_arr
    cdef double[:, ::1] S = S_arr
    cdef unsigned char[::1] flipped = F_arr

    cdef double a[9]
    cdef double s[3]
    cdef double ur[9]
    cdef double vtr[9]
    cdef double rr[9]
    cdef Py_ssize_t k
    cdef int r, c, best
    cdef double w, big

    with nogil:
        for k in range(n):
            w = wt[k]
            for r in range(3):
                for c in range(3):
                    a[3 * r + c] = C[k, r, c] + w * u[k, r] * t[k, c]
            _svd3(a, ur, s, vtr)
            for c in range(3):
                best = 0
                big = fabs(ur[c])
                for r in range(1, 3):
                    if fabs(ur[3 * r + c]) > big:
                        big = fabs(ur[3 * r + c])
                        best = r
                if ur[3 * best + c] < 0:
                    for r in range(3):
                        ur[3 * r + c] = -ur[3 * r + c]
                        vtr[3 * c + r] = -vtr[3 * c + r]
            _v_ut(vtr, ur, rr)
            if _det3(rr) < 0:
                for r in range(3):
                    ur[3 * r + 2] = -ur[3 * r + 2]
                _v_ut(vtr, ur, rr)
                flipped[k] = 1
            for r in range(9):
                R[k, r // 3, r % 3] = rr[r]
                Uo[k, r // 3, r % 3] = ur[r]
            for r in range(3):
                S[k, r] = s[r]
    if np.any(~np.isfinite(S_arr)):
        raise FloatingPointError("non-finite singular values")
    return R_arr, U_arr, S_arr, F_arr


def assemble_rhs(const long[:, ::1] faces, const double[:, :, ::1] coeff,
                 const double[:, :, ::1] R, Py_ssize_t n_vertices):
    out_arr = np.zeros((n_vertices, 3))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t f, nf = faces.shape[0]
    cdef long i0, i1, i2, k
    cdef int a, b, c
    cdef double rb[9]
    cdef double acc
    with nogil:
        for f in range(nf):
            i0 = faces[f, 0]
            i1 = faces[f, 1]
            i2 = faces[f, 2]
            for a in range(3):
                for b in range(3):
                    rb[3 * a + b] = (R[i0, a, b] + R[i1, a, b] + R[i2, a, b]) / 3.0
            for c in range(3):
                k = faces[f, c]
                for a in range(3):
                    acc = rb[3 * a] * coeff[f, c, 0] + rb[3 * a + 1] * coeff[f, c, 1] + rb[3 * a + 2] * coeff[f, c, 2]
                    out[k, a] += acc
    return out_arr


def rhs_adjoint(const long[:, ::1] faces, const double[:, :, ::1] coeff,
                const double[:, ::1] g, Py_ssize_t n_vertices):
    out_arr = np.zeros((n_vertices, 3, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t f, nf = faces.shape[0]
    cdef long k
    cdef int a, b, c
    cdef double d[9]
    with nogil:
        for f in range(nf):
            for a in range(9):
                d[a] = 0.0
            for c in range(3):
                k = faces[f, c]
                for a in range(3):
                    for b in range(3):
                        d[3 * a + b] += g[k, a] * coeff[f, c, b]
            for c in range(3):
                k = faces[f, c]
                for a in range(3):
                    for b in range(3):
                        out[k, a, b] += d[3 * a + b] / 3.0
    return out_arr


def procrustes_vjp(const double[:, :, ::1] R, const double[:, :, ::1] U, const double[:, ::1] sigma,
                   const unsigned char[::1] flipped, const double[:, :, ::1] G, double eps_rel):
    cdef Py_ssize_t n = R.shape[0]
    out_arr = np.empty((n, 3, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t k
    cdef int i, j, l
    cdef double s[3]
    cdef double t1[9]
    cdef double B[9]
    cdef double Cp[9]
    cdef double P[9]
    cdef double eps, dd, acc
    with nogil:
        for k in range(n):
            s[0] = sigma[k, 0]
            s[1] = sigma[k, 1]
            s[2] = -sigma[k, 2] if flipped[k] else sigma[k, 2]
            eps = eps_rel * sigma[k, 0]
            # t1 = R^T G
            for i in range(3):
                for j in range(3):
                    t1[3 * i + j] = R[k, 0, i] * G[k, 0, j] + R[k, 1, i] * G[k, 1, j] + R[k, 2, i] * G[k, 2, j]
            # B = U^T t1 U
            for i in range(3):
                for j in range(3):
                    acc = 0.0
                    for l in range(3):
                        acc = acc + U[k, 0, i] * t1[l] * U[k, l, j] + U[k, 1, i] * t1[3 + l] * U[k, l, j] + U[k, 2, i] * t1[6 + l] * U[k, l, j]
                    B[3 * i + j] = acc
            for i in range(3):
                for j in range(3):
                    dd = s[i] + s[j]
                    Cp[3 * i + j] = 0.5 * (B[3 * i + j] - B[3 * j + i]) * dd / (dd * dd + eps * eps)
            # P = U Cp U^T
            for i in range(3):
                for j in range(3):
                    acc = 0.0
                    for l in range(3):
                        acc = acc + U[k, i, l] * (Cp[3 * l] * U[k, j, 0] + Cp[3 * l + 1] * U[k, j, 1] + Cp[3 * l + 2] * U[k, j, 2])
                    P[3 * i + j] = acc
            # out = -2 P R^T
            for i in range(3):
                for j in range(3):
                    out[k, i, j] = -2.0 * (P[3 * i] * R[k, j, 0] + P[3 * i + 1] * R[k, j, 1] + P[3 * i + 2] * R[k, j, 2])
    return out_arr
