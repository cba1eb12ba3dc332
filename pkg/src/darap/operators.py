"""Discrete differential operators on a source mesh.

Everything here is computed once per source mesh and then shared read-only:
cotangent edge weights, vertex masses, spokes-and-rims neighborhoods, the
positive semidefinite cotangent Laplacian and its pinned Cholesky factor.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DataError, FactorizationError
from .mesh import Mesh, face_areas, face_cross, undirected_edges, validate, vertex_components, vertex_normals

try:
    import cholespy
except ImportError:  # pragma: no cover - exercised only without the wheel
    cholespy = None

log = logging.getLogger(__name__)

COT_CLAMP = 1e4


def corner_cotangents(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Cotangent of the interior angle at each face corner, ``(F, 3)``."""
    out = np.empty(faces.shape, dtype=np.float64)
    for c in range(3):
        p = vertices[faces[:, c]]
        a = vertices[faces[:, (c + 1) % 3]] - p
        b = vertices[faces[:, (c + 2) % 3]] - p
        dot = np.einsum("ij,ij->i", a, b)
        crs = np.linalg.norm(np.cross(a, b), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[:, c] = dot / crs
    return out


def edge_weights(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetrized cotangent weights.

    Returns ``(edges, weights, face_edge)``: interior edges get
    ``(cot a + cot b) / 2``, boundary edges ``cot a / 2``.
    """
    edges, face_edge = undirected_edges(mesh.faces)
    cot = corner_cotangents(mesh.vertices, mesh.faces)
    w = 0.5 * np.bincount(face_edge.ravel(), weights=cot.ravel(), minlength=len(edges))
    return edges, np.clip(w, -COT_CLAMP, COT_CLAMP), face_edge


def laplacian_from_weights(n_vertices: int, edges: np.ndarray, w: np.ndarray) -> sp.csr_matrix:
    i, j = edges[:, 0], edges[:, 1]
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([j, i, i, j])
    vals = np.concatenate([-w, -w, w, w])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_vertices, n_vertices))


def cotangent_laplacian(mesh: Mesh) -> sp.csr_matrix:
    edges, w, _ = edge_weights(mesh)
    return laplacian_from_weights(mesh.n_vertices, edges, w)


def vertex_masses(mesh: Mesh, kind: str = "barycentric") -> np.ndarray:
    """Per-vertex area share.

    ``barycentric`` gives each vertex a third of every incident face.
    ``voronoi`` is the mixed Voronoi area, which falls back to
    barycentric-style splits on obtuse triangles.
    """
    area = face_areas(mesh)
    faces = mesh.faces
    V = mesh.n_vertices
    if kind == "barycentric":
        return np.bincount(faces.ravel(), weights=np.repeat(area / 3.0, 3), minlength=V)
    if kind != "voronoi":
        raise ValueError(f"unknown mass kind {kind!r}")
    v = mesh.vertices
    cot = corner_cotangents(v, faces)
    per = np.empty(faces.shape)
    sq = np.empty(faces.shape)  # squared length of edge opposite corner c
    for c in range(3):
        d = v[faces[:, (c + 2) % 3]] - v[faces[:, (c + 1) % 3]]
        sq[:, c] = np.einsum("ij,ij->i", d, d)
    for c in range(3):
        c1, c2 = (c + 1) % 3, (c + 2) % 3
        # edge (c, c1) is opposite c2, edge (c, c2) opposite c1
        per[:, c] = (sq[:, c2] * cot[:, c2] + sq[:, c1] * cot[:, c1]) / 8.0
    obtuse = cot < 0
    any_obtuse = obtuse.any(axis=1)
    per[any_obtuse] = (area[any_obtuse] / 4.0)[:, None]
    per[obtuse] = np.repeat(area[:, None], 3, axis=1)[obtuse] / 2.0
    return np.bincount(faces.ravel(), weights=per.ravel(), minlength=V)


class PinnedSolver:
    """Reusable solver for the Laplacian with one vertex per component held at zero.

    ``solve`` is serialized with a lock so one instance can be shared across threads.
    """

    def __init__(self, L: sp.spmatrix, pinned: np.ndarray, backend: str = "auto"):
        n = L.shape[0]
        self.n = n
        self.pinned = np.asarray(pinned, dtype=np.int64)
        keep = np.ones(n, dtype=bool)
        keep[self.pinned] = False
        self.keep = np.flatnonzero(keep)
        Lr = sp.csr_matrix(L)[self.keep][:, self.keep].tocoo()
        self._lock = threading.Lock()
        if backend == "auto":
            backend = "cholespy" if cholespy is not None else "splu"
        self.backend = backend
        m = len(self.keep)
        if backend == "cholespy":
            try:
                self._chol = cholespy.CholeskySolverD(
                    m,
                    Lr.row.astype(np.int32),
                    Lr.col.astype(np.int32),
                    Lr.data.astype(np.float64),
                    cholespy.MatrixType.COO,
                )
            except Exception as exc:  # noqa: BLE001 - cholmod reports via generic errors
                raise FactorizationError(f"Cholesky factorization failed: {exc}", _smallest_pivot(Lr)) from exc
        elif backend == "splu":
            try:
                self._lu = spla.splu(Lr.tocsc(), permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:
                raise FactorizationError(f"LU factorization failed: {exc}", 0.0) from exc
        else:
            raise ValueError(f"unknown solver backend {backend!r}")
        self._Lr = Lr.tocsr()
        self._check()

    def _check(self):
        rng = np.random.default_rng(1234)
        b = rng.standard_normal(len(self.keep))
        x = self._solve_reduced(b[:, None])[:, 0]
        res = np.linalg.norm(self._Lr @ x - b) / np.linalg.norm(b)
        if not np.isfinite(res) or res > 1e-6:
            raise FactorizationError(f"factorization is not usable (residual {res:.3e})", _smallest_pivot(self._Lr))

    def _solve_reduced(self, b: np.ndarray) -> np.ndarray:
        b = np.ascontiguousarray(b, dtype=np.float64)
        with self._lock:
            if self.backend == "cholespy":
                x = np.zeros_like(b)
                self._chol.solve(b, x)
                return x
            return self._lu.solve(b)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``L x = b`` on the unpinned rows; pinned entries of ``x`` are zero."""
        b = np.asarray(b, dtype=np.float64)
        vec = b.ndim == 1
        b2 = b[:, None] if vec else b
        x = np.zeros((self.n, b2.shape[1]))
        x[self.keep] = self._solve_reduced(b2[self.keep])
        return x[:, 0] if vec else x


def _smallest_pivot(Lr) -> float:
    try:
        lu = spla.splu(sp.csc_matrix(Lr), permc_spec="MMD_AT_PLUS_A")
        return float(np.min(np.abs(lu.U.diagonal())))
    except RuntimeError:
        return 0.0


@dataclass(eq=False)
class SurfaceOperators:
    """Precomputed operators for one source mesh."""

    mesh: Mesh
    edges: np.ndarray  # (E, 2) sorted vertex pairs
    edge_weights: np.ndarray  # (E,)
    edge_face_count: np.ndarray  # (E,) 1 on the boundary, 2 inside
    face_edge: np.ndarray  # (F, 3) edge opposite each corner
    corner_cot: np.ndarray  # (F, 3)
    vertex_masses: np.ndarray  # (V,)
    neighborhoods: np.ndarray  # (V, max_n) spokes-and-rims edge ids, -1 padded
    vertex_faces_indptr: np.ndarray
    vertex_faces: np.ndarray
    laplacian: sp.csr_matrix
    solver: PinnedSolver
    pinned_vertices: np.ndarray
    components: np.ndarray  # (V,) component label
    source_normals: np.ndarray  # (V, 3)
    edge_covariance: np.ndarray  # (V, 3, 3) sum of w e e^T over each neighborhood
    rhs_coeff: np.ndarray  # (F, 3, 3) per-corner rhs vector, see assemble_rhs
    neighborhood_weights: str = "symmetric"
    mass_kind: str = "barycentric"

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def pinned_vertex(self) -> int:
        return int(self.pinned_vertices[0])

    @property
    def n_components(self) -> int:
        return len(self.pinned_vertices)

    def incident_faces(self, k: int) -> np.ndarray:
        return self.vertex_faces[self.vertex_faces_indptr[k] : self.vertex_faces_indptr[k + 1]]

    def centroid(self, x: np.ndarray) -> np.ndarray:
        """Mass-weighted centroid of a ``(V, 3)`` array over the whole mesh."""
        a = self.vertex_masses
        return a @ x / a.sum()

    def align_centroid(self, x: np.ndarray, target: Optional[np.ndarray] = None) -> np.ndarray:
        """Translate each component so the mass-weighted centroid of the result equals ``target``.

        Components keep their source offsets relative to each other.
        """
        src = self.mesh.vertices
        target = self.centroid(src) if target is None else np.asarray(target, dtype=np.float64)
        if self.n_components == 1:
            return x - self.centroid(x) + target
        shift = target - self.centroid(src)
        out = np.empty_like(x)
        a = self.vertex_masses
        for c in range(self.n_components):
            sel = self.components == c
            ac = a[sel]
            out[sel] = x[sel] - ac @ x[sel] / ac.sum() + ac @ src[sel] / ac.sum() + shift
        return out

    def align_centroid_adjoint(self, g: np.ndarray) -> np.ndarray:
        a = self.vertex_masses
        if self.n_components == 1:
            return g - np.outer(a / a.sum(), g.sum(axis=0))
        out = np.empty_like(g)
        for c in range(self.n_components):
            sel = self.components == c
            ac = a[sel]
            out[sel] = g[sel] - np.outer(ac / ac.sum(), g[sel].sum(axis=0))
        return out

    def dump_laplacian(self, path) -> None:
        """Write L in Matrix Market symmetric coordinate format."""
        scipy.io.mmwrite(path, sp.coo_matrix(self.laplacian), symmetry="symmetric", precision=17)


def _neighborhoods(faces: np.ndarray, face_edge: np.ndarray, n_vertices: int):
    # each face hands its three edges to each of its three vertices
    vert = np.repeat(faces, 3, axis=1).ravel()  # (F*9,)
    edge = np.tile(face_edge, (1, 3)).ravel()
    pairs = np.unique(np.stack([vert, edge], axis=1), axis=0)
    counts = np.bincount(pairs[:, 0], minlength=n_vertices)
    width = int(counts.max())
    padded = np.full((n_vertices, width), -1, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(pairs)) - starts[pairs[:, 0]]
    padded[pairs[:, 0], slot] = pairs[:, 1]

    order = np.argsort(faces.ravel(), kind="stable")
    vf = (order // 3).astype(np.int64)
    indptr = np.concatenate([[0], np.cumsum(np.bincount(faces.ravel(), minlength=n_vertices))])
    return padded, indptr, vf


def _edge_covariance(mesh, edges, weights, neighborhoods, face_edge, corner_cot, mode):
    v = mesh.vertices
    evec = v[edges[:, 1]] - v[edges[:, 0]]
    if mode == "symmetric":
        # zero-padded batch: pad slots carry zero weight
        valid = neighborhoods >= 0
        idx = np.where(valid, neighborhoods, 0)
        w = np.where(valid, weights[idx], 0.0)
        e = evec[idx]
        return np.einsum("vn,vni,vnj->vij", w, e, e)
    if mode == "halfedge":
        # every face contributes its own three edges with that face's half-cotangent
        faces = mesh.faces
        ev = evec[face_edge]  # (F, 3, 3)
        hw = 0.5 * np.clip(corner_cot, -COT_CLAMP, COT_CLAMP)
        per_face = np.einsum("fc,fci,fcj->fij", hw, ev, ev).reshape(-1, 9)
        rep = np.repeat(per_face, 3, axis=0)
        idx = faces.ravel()
        out = np.stack([np.bincount(idx, weights=rep[:, k], minlength=mesh.n_vertices) for k in range(9)], axis=1)
        return out.reshape(-1, 3, 3)
    raise ValueError(f"unknown neighborhood weighting {mode!r}")


def _rhs_coefficients(mesh, edges, weights, face_count, face_edge):
    """Per face corner k of (k, m, n): ``w_km/c_km (v_k - v_m) + w_kn/c_kn (v_k - v_n)``.

    ``c`` is the number of faces sharing the edge, so summing over faces around
    ``k`` gives exactly the Laplacian row ``(L V)_k`` for identity rotations.
    """
    v = mesh.vertices
    f = mesh.faces
    scaled = weights / face_count
    coeff = np.empty((len(f), 3, 3))
    for c in range(3):
        k = f[:, c]
        m = f[:, (c + 1) % 3]
        n = f[:, (c + 2) % 3]
        w_kn = scaled[face_edge[:, (c + 1) % 3]]  # edge (k, n) is opposite m
        w_km = scaled[face_edge[:, (c + 2) % 3]]  # edge (k, m) is opposite n
        coeff[:, c] = w_km[:, None] * (v[k] - v[m]) + w_kn[:, None] * (v[k] - v[n])
    return coeff


def build_operators(
    mesh: Mesh,
    pin: Union[int, str] = "first",
    mass: str = "barycentric",
    neighborhood_weights: str = "symmetric",
    solver_backend: str = "auto",
    check: bool = True,
) -> SurfaceOperators:
    """Precompute every operator the deformation layer needs for ``mesh``."""
    if check:
        report = validate(mesh)
        if not report.manifold:
            raise DataError(f"mesh is not edge-manifold ({report.count('non_manifold_edge')} bad edges)")
        if report.count("isolated_vertex"):
            raise DataError("mesh has isolated vertices")
    V = mesh.n_vertices
    edges, w, face_edge = edge_weights(mesh)
    face_count = np.bincount(face_edge.ravel(), minlength=len(edges)).astype(np.float64)
    cot = corner_cotangents(mesh.vertices, mesh.faces)
    masses = vertex_masses(mesh, mass)
    nbhd, indptr, vf = _neighborhoods(mesh.faces, face_edge, V)
    L = laplacian_from_weights(V, edges, w)

    n_comp, labels = vertex_components(V, mesh.faces)
    firsts = np.array([np.flatnonzero(labels == c)[0] for c in range(n_comp)], dtype=np.int64)
    if pin != "first":
        pin = int(pin)
        if not 0 <= pin < V:
            raise DataError(f"pin vertex {pin} out of range")
        firsts[labels[pin]] = pin
    solver = PinnedSolver(L, firsts, backend=solver_backend)

    return SurfaceOperators(
        mesh=mesh,
        edges=edges,
        edge_weights=w,
        edge_face_count=face_count,
        face_edge=face_edge,
        corner_cot=cot,
        vertex_masses=masses,
        neighborhoods=nbhd,
        vertex_faces_indptr=indptr,
        vertex_faces=vf,
        laplacian=L,
        solver=solver,
        pinned_vertices=firsts,
        components=labels,
        source_normals=vertex_normals(mesh),
        edge_covariance=_edge_covariance(mesh, edges, w, nbhd, face_edge, cot, neighborhood_weights),
        rhs_coeff=_rhs_coefficients(mesh, edges, w, face_count, face_edge),
        neighborhood_weights=neighborhood_weights,
        mass_kind=mass,
    )


def spokes_rims(operators: SurfaceOperators, k: int) -> List[Tuple[int, int, float]]:
    """Edges of every face incident to ``k`` as ``(i, j, w_ij)``, each once."""
    if not 0 <= k < operators.n_vertices:
        raise IndexError(f"vertex {k} out of range")
    ids = operators.neighborhoods[k]
    ids = ids[ids >= 0]
    return [(int(operators.edges[e, 0]), int(operators.edges[e, 1]), float(operators.edge_weights[e])) for e in ids]


@dataclass(eq=False)
class GradientOperators:
    """Per-face gradient of piecewise-linear functions and the face mass."""

    gradient: sp.csr_matrix  # (3F, V), row 3f+d is the d-th component on face f
    face_mass: np.ndarray  # (F,) face areas

    @property
    def mass_matrix(self) -> sp.dia_matrix:
        return sp.diags(np.repeat(self.face_mass, 3))

    def laplacian(self) -> sp.csr_matrix:
        G = self.gradient
        return (G.T @ self.mass_matrix @ G).tocsr()


def build_gradient_ops(mesh: Mesh) -> GradientOperators:
    v, f = mesh.vertices, mesh.faces
    cross = face_cross(v, f)
    dbl = np.linalg.norm(cross, axis=1)
    if np.any(dbl <= 0):
        raise DataError(f"zero-area face {int(np.flatnonzero(dbl <= 0)[0])}")
    n = cross / dbl[:, None]
    F = len(f)
    rows, cols, vals = [], [], []
    for c in range(3):
        # grad of the hat at corner c: n x (opposite edge, CCW) / (2A)
        e = v[f[:, (c + 2) % 3]] - v[f[:, (c + 1) % 3]]
        g = np.cross(n, e) / dbl[:, None]
        for d in range(3):
            rows.append(3 * np.arange(F) + d)
            cols.append(f[:, c])
            vals.append(g[:, d])
    G = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * F, mesh.n_vertices))
    return GradientOperators(gradient=G, face_mass=0.5 * dbl)
