import importlib
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import fixture_ops
from darap import kernels
from darap.grad import SVD_EPS_REL

compiled = pytest.mark.skipif(kernels.compiled is None, reason="compiled kernels not built")


def _instances(seed, n=2000):
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((n, 12, 3))
    w = rng.uniform(0.05, 1.5, (n, 12))
    C = np.einsum("kn,kna,knb->kab", w, E, E)
    u = rng.standard_normal((n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    t = rng.standard_normal((n, 3))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    return C, u, t, rng.uniform(0, 50, n)


def test_selection_defaults_to_compiled_when_present():
    assert kernels.backend.NAME in ("cython", "python")
    if kernels.compiled is not None:
        assert kernels.get().NAME == "cython"
    assert kernels.get("python").NAME == "python"
    with pytest.raises(ValueError):
        kernels.get("fortran")


def test_env_override_selects_fallback():
    code = "from darap import kernels; print(kernels.get().NAME)"
    env = dict(os.environ, DARAP_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_python_procrustes_properties():
    C, u, t, w = _instances(0, 500)
    R, U, S, flipped = kernels.get("python").procrustes(C, u, t, w)
    assert np.allclose(np.einsum("kba,kbc->kac", R, R), np.eye(3), atol=1e-12)
    assert np.all(np.linalg.det(R) > 0)
    assert np.all(np.diff(S, axis=1) <= 0)
    X = C + w[:, None, None] * np.einsum("ka,kb->kab", u, t)
    # R maximizes tr(R X); tr(R X) equals the signed singular-value sum
    signed = S[:, 0] + S[:, 1] + np.where(flipped == 1, -1.0, 1.0) * S[:, 2]
    assert np.allclose(np.einsum("kab,kba->k", R, X), signed, rtol=1e-12)


@compiled
def test_backends_agree_on_procrustes():
    C, u, t, w = _instances(1)
    a = kernels.get("python").procrustes(C, u, t, w)
    b = kernels.get("cython").procrustes(C, u, t, w)
    assert np.max(np.abs(a[0] - b[0])) < 1e-11
    assert np.max(np.abs(a[2] - b[2])) < 1e-11 * np.max(a[2])
    assert np.array_equal(a[3], b[3])


@compiled
def test_backends_agree_on_rank_deficient_input():
    # lambda = 0 on a flat neighborhood: rank-two covariance
    C, u, t, w = _instances(2, 200)
    E = np.random.default_rng(3).standard_normal((200, 6, 3))
    E[:, :, 2] = 0.0
    C = np.einsum("kna,knb->kab", E, E)
    w[:] = 0.0
    a = kernels.get("python").procrustes(C, u, t, w)
    b = kernels.get("cython").procrustes(C, u, t, w)
    assert np.max(np.abs(a[0] - b[0])) < 1e-10
    assert np.allclose(a[0], np.eye(3), atol=1e-10)


@compiled
def test_backends_agree_on_rhs_and_adjoint():
    ops = fixture_ops("torus")
    rng = np.random.default_rng(4)
    R = rng.standard_normal((ops.n_vertices, 3, 3))
    g = rng.standard_normal((ops.n_vertices, 3))
    faces = np.ascontiguousarray(ops.mesh.faces)
    py, cy = kernels.get("python"), kernels.get("cython")
    assert np.allclose(py.assemble_rhs(faces, ops.rhs_coeff, R, ops.n_vertices), cy.assemble_rhs(faces, ops.rhs_coeff, R, ops.n_vertices), atol=1e-13)
    assert np.allclose(py.rhs_adjoint(faces, ops.rhs_coeff, g, ops.n_vertices), cy.rhs_adjoint(faces, ops.rhs_coeff, g, ops.n_vertices), atol=1e-13)


@compiled
def test_backends_agree_on_procrustes_vjp():
    C, u, t, w = _instances(5, 500)
    R, U, S, flipped = kernels.get("python").procrustes(C, u, t, w)
    G = np.random.default_rng(6).standard_normal(R.shape)
    a = kernels.get("python").procrustes_vjp(R, U, S, flipped, G, SVD_EPS_REL)
    b = kernels.get("cython").procrustes_vjp(R, U, S, flipped, G, SVD_EPS_REL)
    assert np.max(np.abs(a - b)) < 1e-12 * max(1.0, np.max(np.abs(a)))


def test_rhs_adjoint_is_transpose():
    ops = fixture_ops("grid")
    rng = np.random.default_rng(7)
    R = rng.standard_normal((ops.n_vertices, 3, 3))
    g = rng.standard_normal((ops.n_vertices, 3))
    faces = np.ascontiguousarray(ops.mesh.faces)
    for name in kernels.available():
        k = kernels.get(name)
        lhs = np.sum(k.assemble_rhs(faces, ops.rhs_coeff, R, ops.n_vertices) * g)
        rhs = np.sum(R * k.rhs_adjoint(faces, ops.rhs_coeff, g, ops.n_vertices))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_fallback_module_imports_without_extension():
    mod = importlib.import_module("darap._kernels_py")
    assert mod.NAME == "python"
