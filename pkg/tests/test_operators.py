import threading

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from conftest import SMALL, fixture_mesh, fixture_ops
from darap import shapes
from darap.errors import DataError
from darap.mesh import Mesh, face_areas, undirected_edges
from darap.operators import (
    PinnedSolver,
    build_gradient_ops,
    build_operators,
    cotangent_laplacian,
    edge_weights,
    spokes_rims,
    vertex_masses,
)


def _cot(a, b):
    return np.dot(a, b) / np.linalg.norm(np.cross(a, b))


def laplacian_oracle(mesh):
    """Per-face assembly, one triangle at a time."""
    V = mesh.n_vertices
    L = np.zeros((V, V))
    v = mesh.vertices
    for f in mesh.faces:
        for c in range(3):
            i, j, k = f[c], f[(c + 1) % 3], f[(c + 2) % 3]
            w = 0.5 * _cot(v[j] - v[i], v[k] - v[i])  # angle at i, opposite edge (j, k)
            L[j, k] -= w
            L[k, j] -= w
            L[j, j] += w
            L[k, k] += w
    return L


def test_equilateral_pair_weight():
    h = np.sqrt(3.0) / 2
    m = Mesh([[0, 0, 0], [1, 0, 0], [0.5, h, 0], [0.5, -h, 0]], [[0, 1, 2], [1, 0, 3]])
    edges, w, _ = edge_weights(m)
    shared = np.flatnonzero((edges[:, 0] == 0) & (edges[:, 1] == 1))[0]
    assert w[shared] == pytest.approx(1 / np.sqrt(3), rel=1e-12)
    # boundary edges carry a single half-cotangent
    assert np.allclose(np.delete(w, shared), 0.5 / np.sqrt(3), rtol=1e-12)


@pytest.mark.parametrize("name", SMALL)
def test_laplacian_matches_per_face_oracle(name):
    m = fixture_mesh(name)
    L = cotangent_laplacian(m).toarray()
    assert np.max(np.abs(L - laplacian_oracle(m))) < 1e-12 * max(1.0, np.abs(L).max())


@pytest.mark.parametrize("name", SMALL + ["icosphere3"])
def test_laplacian_structure(name):
    m = fixture_mesh(name)
    L = fixture_ops(name).laplacian
    assert np.max(np.abs(L @ np.ones(m.n_vertices))) < 1e-10 * np.abs(L).max()
    assert abs(L - L.T).max() == 0
    rng = np.random.default_rng(0)
    X = rng.standard_normal((m.n_vertices, 100))
    assert np.min(np.einsum("ij,ij->j", X, L @ X)) > -1e-10


def test_null_space_per_component():
    ops = build_operators(shapes.split_cube())
    assert ops.n_components == 6
    evals = np.linalg.eigvalsh(ops.laplacian.toarray())
    assert np.sum(np.abs(evals) < 1e-10) == 6


@pytest.mark.parametrize("name", SMALL + ["icosphere3"])
def test_masses_partition_area(name):
    m = fixture_mesh(name)
    for kind in ("barycentric", "voronoi"):
        a = vertex_masses(m, kind)
        assert a.sum() == pytest.approx(face_areas(m).sum(), rel=1e-10)
        assert np.all(a > 0)


def test_mass_of_six_unit_faces():
    ang = np.linspace(0, 2 * np.pi, 7)[:-1]
    r = np.sqrt(2 / np.sin(np.pi / 3))  # each of six slices has area 1
    v = np.vstack([[0, 0, 0], r * np.stack([np.cos(ang), np.sin(ang), np.zeros(6)], 1)])
    m = Mesh(v, [[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)])
    assert np.allclose(face_areas(m), 1.0)
    assert vertex_masses(m)[0] == pytest.approx(2.0, rel=1e-12)


def test_masses_match_independent_accumulation():
    m = fixture_mesh("grid")
    oracle = np.zeros(m.n_vertices)
    for f in m.faces:
        a, b, c = m.vertices[f]
        oracle[f] += np.linalg.norm(np.cross(b - a, c - a)) / 6.0
    assert np.allclose(vertex_masses(m), oracle, rtol=1e-12, atol=0)
    with pytest.raises(ValueError):
        vertex_masses(m, "hexagonal")


def test_voronoi_mass_on_acute_triangle():
    h = np.sqrt(3.0)
    m = Mesh([[0, 0, 0], [2, 0, 0], [1, h, 0]], [[0, 1, 2]])
    assert np.allclose(vertex_masses(m, "voronoi"), h / 3)


def test_spokes_rims_counts():
    ops = fixture_ops("icosphere3")
    valence = np.bincount(ops.edges.ravel())
    k = int(np.flatnonzero(valence == 6)[0])
    sr = spokes_rims(ops, k)
    assert len(sr) == 12
    spokes = [e for e in sr if k in e[:2]]
    assert len(spokes) == 6
    with pytest.raises(IndexError):
        spokes_rims(ops, ops.n_vertices)


def test_boundary_vertex_neighborhood():
    # corner fan: vertex 0 sits on the boundary with two faces
    m = Mesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    ops = build_operators(m)
    assert len(spokes_rims(ops, 0)) == 5


@pytest.mark.parametrize("name", ["grid", "torus", "icosphere2"])
def test_neighborhood_sets(name):
    m, ops = fixture_mesh(name), fixture_ops(name)
    edges, face_edge = undirected_edges(m.faces)
    for k in range(m.n_vertices):
        got = sorted((i, j) for i, j, _ in spokes_rims(ops, k))
        want = sorted({tuple(edges[e]) for f in np.flatnonzero((m.faces == k).any(1)) for e in face_edge[f]})
        assert got == want
    union = {(i, j) for k in range(m.n_vertices) for i, j, _ in spokes_rims(ops, k)}
    assert union == {tuple(e) for e in edges}


def test_covariance_matches_neighborhood_sum():
    m, ops = fixture_mesh("grid"), fixture_ops("grid")
    v = m.vertices
    for k in (0, 10, 25):
        C = np.zeros((3, 3))
        for i, j, w in spokes_rims(ops, k):
            e = v[j] - v[i]
            C += w * np.outer(e, e)
        assert np.allclose(ops.edge_covariance[k], C, atol=1e-14)


def test_halfedge_neighborhood_option():
    m = fixture_mesh("grid")
    ops = build_operators(m, neighborhood_weights="halfedge")
    sym = fixture_ops("grid")
    # per-face cotangents differ from the symmetrized pair on a jittered grid
    assert not np.allclose(ops.edge_covariance, sym.edge_covariance)
    with pytest.raises(ValueError):
        build_operators(m, neighborhood_weights="directed")


@pytest.mark.parametrize("backend", ["cholespy", "splu"])
def test_factorization_reuse(backend):
    m = fixture_mesh("icosphere3")
    L = cotangent_laplacian(m)
    s = PinnedSolver(L, np.array([0]), backend=backend)
    rng = np.random.default_rng(5)
    B = rng.standard_normal((m.n_vertices, 100))
    X = s.solve(B)
    keep = np.arange(1, m.n_vertices)
    res = np.linalg.norm((L @ X - B)[keep], axis=0) / np.linalg.norm(B[keep], axis=0)
    assert res.max() < 1e-8
    assert np.all(X[0] == 0)
    assert s.solve(B[:, 0]).shape == (m.n_vertices,)


def test_solver_is_thread_safe():
    ops = fixture_ops("icosphere3")
    rng = np.random.default_rng(2)
    bs = [rng.standard_normal((ops.n_vertices, 3)) for _ in range(8)]
    want = [ops.solver.solve(b) for b in bs]
    got = [None] * len(bs)

    def run(i):
        for _ in range(5):
            got[i] = ops.solver.solve(bs[i])

    ts = [threading.Thread(target=run, args=(i,)) for i in range(len(bs))]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    for a, b in zip(got, want):
        assert np.array_equal(a, b)


def test_build_rejects_non_manifold():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]]
    m = Mesh(v, [[0, 1, 2], [1, 0, 3], [0, 1, 4]])
    with pytest.raises(DataError):
        build_operators(m)


def test_pin_choice():
    m = fixture_mesh("icosphere2")
    ops = build_operators(m, pin=17)
    assert ops.pinned_vertex == 17
    with pytest.raises(DataError):
        build_operators(m, pin=10**6)


@pytest.mark.parametrize("name", SMALL + ["icosphere3"])
def test_gradient_operator_identity(name):
    m = fixture_mesh(name)
    g = build_gradient_ops(m)
    assert np.allclose(g.face_mass, face_areas(m), rtol=1e-14)
    assert np.abs(g.gradient @ np.ones(m.n_vertices)).max() < 1e-10
    L = cotangent_laplacian(m)
    assert abs(g.laplacian() - L).max() < 1e-10


def test_gradient_of_linear_function():
    m = fixture_mesh("icosphere2")
    g = build_gradient_ops(m).gradient @ m.vertices[:, 0]
    g = g.reshape(-1, 3)
    cross = np.cross(m.vertices[m.faces[:, 1]] - m.vertices[m.faces[:, 0]], m.vertices[m.faces[:, 2]] - m.vertices[m.faces[:, 0]])
    n = cross / np.linalg.norm(cross, axis=1, keepdims=True)
    proj = np.array([1.0, 0, 0]) - n[:, :1] * n
    assert np.allclose(g, proj, atol=1e-12)


def test_gradient_reproduces_planar_jacobian():
    m = fixture_mesh("grid")
    J = (build_gradient_ops(m).gradient @ m.vertices).reshape(-1, 3, 3)
    # row 3f+b, column a is d(x_a)/d(x_b): identity on the plane's x and y
    want = np.diag([1.0, 1.0, 0.0])
    assert np.allclose(J, want, atol=1e-12)


def test_dump_laplacian(tmp_path):
    ops = fixture_ops("tetrahedron")
    p = tmp_path / "L.mtx"
    ops.dump_laplacian(p)
    assert p.read_text().startswith("%%MatrixMarket matrix coordinate real symmetric")
    back = scipy.io.mmread(p)
    assert abs(sp.csr_matrix(back) - ops.laplacian).max() < 1e-15


def test_centroid_alignment_adjoint():
    ops = fixture_ops("split_cube")
    rng = np.random.default_rng(0)
    x, g = rng.standard_normal((2, ops.n_vertices, 3))
    # align is affine; its linear part is self-checked against the adjoint
    lin = ops.align_centroid(x) - ops.align_centroid(np.zeros_like(x))
    assert np.sum(lin * g) == pytest.approx(np.sum(x * ops.align_centroid_adjoint(g)), rel=1e-12)
