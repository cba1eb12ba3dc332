import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import SMALL, fixture_mesh, fixture_ops, random_rotations, rotated
from darap import shapes
from darap.core import (
    DeformConfig,
    NJFSystem,
    RotationField,
    TargetNormals,
    assemble_rhs,
    deform,
    deform_forward,
    global_step,
    load_mask,
    local_energy,
    local_step,
    local_step_direct,
    njf_poisson,
    normal_alignment_angles,
    retarget_lambda,
)
from darap.errors import DataError
from darap.operators import build_gradient_ops, build_operators
from darap.style import cubify_targets
from darap.metrics import axis_deviation


def _max_dev(a, b, mesh):
    return np.max(np.linalg.norm(a - b, axis=1)) / mesh.bbox_diagonal()


# ---------------------------------------------------------------- local step


def test_identity_targets_give_identity(small, backend):
    mesh, ops = small
    for lam in (0.1, 1.0, 8.0, 100.0):
        R = local_step(ops, ops.source_normals, TargetNormals(ops.source_normals), DeformConfig(lam=lam), backend).rotations
        assert np.max(np.linalg.norm(R - np.eye(3), axis=(1, 2))) < 1e-9


def test_zero_lambda_gives_identity(backend):
    ops = fixture_ops("icosphere2")
    t = np.random.default_rng(0).standard_normal((ops.n_vertices, 3))
    R = local_step(ops, ops.source_normals, t, DeformConfig(lam=0.0), backend).rotations
    assert np.max(np.linalg.norm(R - np.eye(3), axis=(1, 2))) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.5, 8.0, 1e3]))
def test_rotations_valid_and_locally_optimal(seed, lam):
    ops = fixture_ops("grid")
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((ops.n_vertices, 3))
    rf = local_step(ops, ops.source_normals, t, DeformConfig(lam=lam))
    rf.check()
    assert np.all(np.linalg.det(rf.rotations) > 0)
    e = local_energy(ops, rf.rotations, t, lam)
    assert np.all(e <= local_energy(ops, np.eye(3), t, lam) + 1e-10)
    for Q in random_rotations(rng, 100):
        assert np.all(e <= local_energy(ops, Q, t, lam) + 1e-10)


def test_thirty_degree_target_matches_bruteforce():
    ops = fixture_ops("icosphere2")
    k = 7
    u = ops.source_normals[k]
    axis = np.cross(u, [0.3, 0.5, 0.8])
    axis /= np.linalg.norm(axis)
    th = np.deg2rad(30)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    Rot = np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K
    t = ops.source_normals.copy()
    t[k] = Rot @ u
    R = local_step(ops, ops.source_normals, t, DeformConfig(lam=8.0)).rotations[k]
    w = 8.0 * ops.vertex_masses[k]
    ref = oracles.procrustes_bruteforce(ops.edge_covariance[k], u, t[k], w)
    assert oracles.rotation_angle(R, ref) < 1e-3


def test_target_norm_is_irrelevant():
    ops = fixture_ops("torus")
    t = np.random.default_rng(3).standard_normal((ops.n_vertices, 3))
    a = local_step(ops, ops.source_normals, t, DeformConfig()).rotations
    b = local_step(ops, ops.source_normals, 7.5 * t, DeformConfig()).rotations
    assert np.allclose(a, b, atol=1e-12)


def test_zero_target_rejected():
    ops = fixture_ops("tetrahedron")
    t = ops.source_normals.copy()
    t[2] = 0.0
    with pytest.raises(DataError, match="target normal 2"):
        local_step(ops, ops.source_normals, t, DeformConfig())


def test_non_finite_target_rejected():
    ops = fixture_ops("tetrahedron")
    t = ops.source_normals.copy()
    t[1, 0] = np.nan
    with pytest.raises(DataError):
        local_step(ops, ops.source_normals, t, DeformConfig())


def test_masked_vertices_get_identity():
    ops = fixture_ops("icosphere2")
    mask = ops.mesh.vertices[:, 2] > 0
    t = np.random.default_rng(1).standard_normal((ops.n_vertices, 3))
    R = local_step(ops, ops.source_normals, t, DeformConfig(mask=mask)).rotations
    assert np.all(R[~mask] == np.eye(3))
    assert np.any(np.linalg.norm(R[mask] - np.eye(3), axis=(1, 2)) > 1e-3)


def test_mask_length_checked():
    ops = fixture_ops("tetrahedron")
    with pytest.raises(DataError):
        local_step(ops, ops.source_normals, ops.source_normals, DeformConfig(mask=np.ones(3, bool)))


def test_negative_lambda_rejected():
    with pytest.raises(DataError):
        DeformConfig(lam=-1.0)


# ---------------------------------------------------------------- direct rotations


def test_direct_identity():
    R = local_step_direct(np.array([[1.0, 0], [0, 1], [0, 0]])).rotations[0]
    assert np.array_equal(R, np.eye(3))


def test_direct_matches_qr():
    p = np.random.default_rng(4).standard_normal((200, 3, 2))
    rf = local_step_direct(p)
    assert np.max(rf.orthogonality_error()) < 1e-10
    assert np.allclose(np.linalg.det(rf.rotations), 1.0, atol=1e-10)
    assert np.allclose(rf.rotations, oracles.qr_frames(p), atol=1e-10)


def test_direct_collinear_rejected():
    with pytest.raises(DataError):
        local_step_direct(np.array([[1.0, 2.0], [0, 0], [0, 0]]))


# ---------------------------------------------------------------- rhs and global step


@pytest.mark.parametrize("name", SMALL)
def test_rhs_matches_dense_oracle(name, backend):
    m, ops = fixture_mesh(name), fixture_ops(name)
    R = random_rotations(np.random.default_rng(9), m.n_vertices)
    got = assemble_rhs(ops, m, R, backend)
    want = oracles.rhs(m, R)
    assert np.max(np.abs(got - want)) <= 1e-12 * np.max(np.abs(want))


def test_rhs_identity_is_laplacian_of_source(small):
    m, ops = small
    rhs = assemble_rhs(ops, m, np.broadcast_to(np.eye(3), (m.n_vertices, 3, 3)))
    assert np.allclose(rhs, ops.laplacian @ m.vertices, atol=1e-13)


def test_rhs_is_linear_in_a_global_rotation(small):
    m, ops = small
    Q = random_rotations(np.random.default_rng(2), 1)[0]
    I = np.broadcast_to(np.eye(3), (m.n_vertices, 3, 3))
    Qs = np.broadcast_to(Q, (m.n_vertices, 3, 3))
    assert np.allclose(assemble_rhs(ops, m, Qs), assemble_rhs(ops, m, I) @ Q.T, atol=1e-13)


def test_rhs_on_a_different_mesh_uses_its_geometry():
    m, ops = fixture_mesh("grid"), fixture_ops("grid")
    moved = m.with_vertices(2.0 * m.vertices)
    I = np.broadcast_to(np.eye(3), (m.n_vertices, 3, 3))
    assert np.allclose(assemble_rhs(ops, moved, I), 2.0 * assemble_rhs(ops, m, I), atol=1e-13)


@pytest.mark.parametrize("name", SMALL)
def test_global_step_matches_dense_oracle(name):
    m, ops = fixture_mesh(name), fixture_ops(name)
    rng = np.random.default_rng(11)
    rhs = rng.standard_normal((m.n_vertices, 3))
    target = rng.standard_normal(3)
    got = global_step(ops, rhs, target)
    want = oracles.global_solve(m, rhs, ops.pinned_vertices, target)
    assert np.linalg.norm(got - want) <= 1e-8 * np.linalg.norm(want)


def test_global_step_residual(small):
    m, ops = small
    rhs = np.random.default_rng(0).standard_normal((m.n_vertices, 3))
    x = global_step(ops, rhs)
    keep = np.setdiff1d(np.arange(m.n_vertices), ops.pinned_vertices)
    assert np.linalg.norm((ops.laplacian @ x - rhs)[keep]) < 1e-8 * np.linalg.norm(rhs[keep])


def test_identity_round_trip(small):
    m, ops = small
    rhs = assemble_rhs(ops, m, np.broadcast_to(np.eye(3), (m.n_vertices, 3, 3)))
    assert _max_dev(global_step(ops, rhs), m.vertices, m) < 1e-6


def test_global_rotation_equivariance(small):
    m, ops = small
    Q = random_rotations(np.random.default_rng(6), 1)[0]
    target = np.array([0.3, -1.0, 2.0])
    x = global_step(ops, assemble_rhs(ops, m, np.broadcast_to(Q, (m.n_vertices, 3, 3))), target)
    c = ops.centroid(m.vertices)
    if ops.n_components == 1:
        want = (m.vertices - c) @ Q.T + target
        assert np.max(np.abs(x - want)) < 1e-8


def test_global_step_rejects_non_finite():
    ops = fixture_ops("tetrahedron")
    rhs = np.zeros((4, 3))
    rhs[0, 0] = np.inf
    with pytest.raises(DataError):
        global_step(ops, rhs)


# ---------------------------------------------------------------- NJF baseline


@pytest.mark.parametrize("name", SMALL)
def test_njf_matches_dense_oracle(name):
    m, ops = fixture_mesh(name), fixture_ops(name)
    M = np.random.default_rng(13).standard_normal((m.n_faces, 3, 3))
    got = njf_poisson(m, build_gradient_ops(m), ops, M)
    want = oracles.njf_solve(m, M, ops.pinned_vertices)
    assert np.linalg.norm(got - want) <= 1e-8 * np.linalg.norm(want)
    fast = NJFSystem.build(build_gradient_ops(m)).solve(ops, M)
    assert np.allclose(fast, got, atol=1e-12)


def test_njf_identity_and_rotation(small):
    m, ops = small
    g = build_gradient_ops(m)
    I = np.broadcast_to(np.eye(3), (m.n_faces, 3, 3))
    assert _max_dev(njf_poisson(m, g, ops, I), m.vertices, m) < 1e-6
    if ops.n_components == 1:
        Q = random_rotations(np.random.default_rng(8), 1)[0]
        x = njf_poisson(m, g, ops, np.broadcast_to(Q, (m.n_faces, 3, 3)))
        c = ops.centroid(m.vertices)
        assert np.max(np.abs(x - ((m.vertices - c) @ Q.T + c))) < 1e-8


def test_njf_shape_checked():
    m, ops = fixture_mesh("tetrahedron"), fixture_ops("tetrahedron")
    with pytest.raises(DataError):
        njf_poisson(m, build_gradient_ops(m), ops, np.zeros((3, 3, 3)))


# ---------------------------------------------------------------- full layer


@pytest.mark.parametrize("name", ["tetrahedron", "icosphere3", "bumpy"])
def test_deform_identity_fixed_point(name):
    m, ops = fixture_mesh(name), fixture_ops(name)
    for lam in (0.1, 1.0, 8.0, 100.0):
        out, _ = deform(m, ops, TargetNormals(ops.source_normals), DeformConfig(lam=lam))
        assert _max_dev(out.vertices, m.vertices, m) < 1e-6


def test_split_cube_is_a_cubify_fixed_point():
    m = shapes.split_cube()
    ops = build_operators(m)
    t = cubify_targets(m)
    assert np.array_equal(t.values, ops.source_normals)
    out, _ = deform(m, ops, t, DeformConfig(lam=8.0))
    assert _max_dev(out.vertices, m.vertices, m) < 1e-12


def test_cubify_reduces_axis_deviation():
    m, ops = fixture_mesh("icosphere3"), fixture_ops("icosphere3")
    out, _ = deform(m, ops, cubify_targets(m), DeformConfig(lam=8.0))
    before, after = axis_deviation(m), axis_deviation(out)
    assert after < before
    # golden value recorded by the first verified build
    assert after == pytest.approx(0.2648465, abs=1e-6)


@pytest.mark.parametrize("name", SMALL)
def test_rigid_equivariance(name):
    m, ops = fixture_mesh(name), fixture_ops(name)
    rng = np.random.default_rng(21)
    Q = random_rotations(rng, 1)[0]
    t = ops.source_normals + 0.5 * rng.standard_normal((m.n_vertices, 3))
    base, _ = deform(m, ops, t, DeformConfig(lam=8.0))
    mq = rotated(m, Q)
    opsq = build_operators(mq)
    out, _ = deform(mq, opsq, t @ Q.T, DeformConfig(lam=8.0))
    assert np.max(np.abs(out.vertices - base.vertices @ Q.T)) < 1e-8 * max(1.0, m.bbox_diagonal())


def test_restore_bbox_option():
    m, ops = fixture_mesh("icosphere2"), fixture_ops("icosphere2")
    t = cubify_targets(m)
    out, _ = deform(m, ops, t, DeformConfig(lam=8.0, restore_bbox=True))
    assert out.bbox_diagonal() == pytest.approx(m.bbox_diagonal(), rel=1e-12)


def test_lambda_sweep():
    m, ops = fixture_mesh("icosphere3"), fixture_ops("icosphere3")
    t = cubify_targets(m)
    assert _max_dev(retarget_lambda(m, ops, t, 0.0).vertices, m.vertices, m) < 1e-6
    means = []
    for lam in (0.0, 1.0, 8.0, 100.0, 1e6):
        R = deform(m, ops, t, DeformConfig(lam=lam))[1]
        ang = normal_alignment_angles(ops, R, t)
        means.append(ang.mean())
        if lam == 1e6:
            assert ang.max() < 1e-3
    assert all(b <= a + 1e-12 for a, b in zip(means, means[1:]))


def test_forward_result_and_deform_agree():
    m, ops = fixture_mesh("torus"), fixture_ops("torus")
    t = cubify_targets(m)
    fw = deform_forward(m, ops, t, DeformConfig())
    out, rf = deform(m, ops, t)
    assert np.array_equal(fw.vertices, out.vertices)
    assert np.array_equal(fw.rotations.rotations, rf.rotations)


def test_backends_agree_on_deform():
    from darap import kernels

    if len(kernels.available()) < 2:
        pytest.skip("compiled kernels not built")
    m, ops = fixture_mesh("bumpy"), fixture_ops("bumpy")
    t = ops.source_normals + 0.4 * np.random.default_rng(0).standard_normal((m.n_vertices, 3))
    a = deform_forward(m, ops, t, backend="python")
    b = deform_forward(m, ops, t, backend="cython")
    assert np.max(np.abs(a.rotations.rotations - b.rotations.rotations)) < 1e-10
    assert np.max(np.abs(a.vertices - b.vertices)) < 1e-10


# ---------------------------------------------------------------- file formats


def test_target_normals_csv_round_trip(tmp_path):
    vals = np.random.default_rng(0).standard_normal((10, 3))
    p = tmp_path / "n.csv"
    TargetNormals(vals).save(p)
    assert np.array_equal(TargetNormals.load(p, 10).values, vals)
    with pytest.raises(DataError, match="10 rows.*11"):
        TargetNormals.load(p, 11)


def test_target_normals_csv_rejects_garbage():
    with pytest.raises(DataError):
        TargetNormals.from_csv("1,2\n")
    with pytest.raises(DataError):
        TargetNormals.from_csv("1,2,x\n")


def test_mask_file(tmp_path):
    p = tmp_path / "mask.txt"
    p.write_text("1\n0\n1\n1\n")
    assert load_mask(p, 4).tolist() == [True, False, True, True]
    with pytest.raises(DataError):
        load_mask(p, 5)
    p.write_text("1\n2\n1\n1\n")
    with pytest.raises(DataError, match="line 2"):
        load_mask(p, 4)


def test_rotation_dump():
    rf = RotationField(np.broadcast_to(np.eye(3), (2, 3, 3)).copy())
    rows = rf.to_csv().strip().splitlines()
    assert len(rows) == 2
    assert [float(x) for x in rows[0].split(",")] == [1, 0, 0, 0, 1, 0, 0, 0, 1]
