"""Triangle meshes: representation, OBJ I/O, normals, areas, normalization and validation."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DataError, ObjParseError

DEGENERATE_AREA_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class Mesh:
    """Vertex positions ``(V, 3)`` and 0-based CCW triangles ``(F, 3)``.

    Arrays are copied and made read-only on construction.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise DataError(f"vertices must have shape (V, 3), got {v.shape}")
        if f.size == 0:
            raise DataError("mesh has no faces")
        if f.ndim != 2 or f.shape[1] != 3:
            raise DataError(f"faces must have shape (F, 3), got {f.shape}")
        if len(v) < 3:
            raise DataError(f"mesh needs at least 3 vertices, got {len(v)}")
        if f.min() < 0 or f.max() >= len(v):
            raise DataError(f"face index out of range [0, {len(v)})")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            bad = int(np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))[0])
            raise DataError(f"face {bad} repeats a vertex index")
        if not np.all(np.isfinite(v)):
            raise DataError("vertex positions must be finite")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces)

    def bbox(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))


# ---------------------------------------------------------------- OBJ I/O


def _obj_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise ObjParseError(f"bad face index {token!r}", lineno) from None
    if idx > 0:
        idx -= 1
    elif idx < 0:
        idx += n_vertices
    else:
        raise ObjParseError("face index 0 is not valid in OBJ", lineno)
    if not 0 <= idx < n_vertices:
        raise ObjParseError(f"face index {token!r} out of range ({n_vertices} vertices so far)", lineno)
    return idx


def parse_obj(text: str) -> Mesh:
    verts: List[Tuple[float, float, float]] = []
    faces: List[Tuple[int, int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ObjParseError("vertex record needs 3 coordinates", lineno)
            try:
                verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError:
                raise ObjParseError(f"bad vertex coordinate in {raw.strip()!r}", lineno) from None
        elif tag == "f":
            if len(parts) < 4:
                raise ObjParseError("face record needs at least 3 vertices", lineno)
            idx = [_obj_index(tok, len(verts), lineno) for tok in parts[1:]]
            # fan from the first corner
            for a, b in zip(idx[1:-1], idx[2:]):
                faces.append((idx[0], a, b))
    if not verts or not faces:
        raise ObjParseError("empty mesh: need both 'v' and 'f' records")
    return Mesh(np.asarray(verts), np.asarray(faces))


def load_obj(path) -> Mesh:
    """Read a Wavefront OBJ file; n-gons are fan-triangulated."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_obj(fh.read())


def format_obj(mesh: Mesh) -> str:
    out = io.StringIO()
    for x, y, z in mesh.vertices:
        # 17 significant digits round-trip doubles exactly
        out.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
    for i, j, k in mesh.faces + 1:
        out.write(f"f {i} {j} {k}\n")
    return out.getvalue()


def save_obj(mesh: Mesh, path) -> None:
    if mesh.n_faces == 0:
        raise DataError("refusing to write a mesh with no faces")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(format_obj(mesh))
    os.replace(tmp, path)


# ---------------------------------------------------------------- geometry


def face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals ``(v1 - v0) x (v2 - v0)``, twice the area in length."""
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    return np.cross(v1 - v0, v2 - v0)


def face_areas(mesh: Mesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross(mesh.vertices, mesh.faces), axis=1)


def face_normals(mesh: Mesh) -> np.ndarray:
    n = face_cross(mesh.vertices, mesh.faces)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def _scatter_faces(values: np.ndarray, faces: np.ndarray, n_vertices: int) -> np.ndarray:
    """Sum a per-face quantity onto each face's three vertices."""
    idx = faces.ravel()
    rep = np.repeat(values, 3, axis=0)
    if rep.ndim == 1:
        return np.bincount(idx, weights=rep, minlength=n_vertices)
    return np.stack([np.bincount(idx, weights=rep[:, d], minlength=n_vertices) for d in range(rep.shape[1])], axis=1)


def vertex_normals_with_flags(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray]:
    """Area-weighted unit vertex normals plus a mask of vertices that needed the fallback.

    A vertex whose weighted sum vanishes takes the unit normal of its first
    incident face. Isolated vertices raise.
    """
    V = mesh.n_vertices
    cross = face_cross(mesh.vertices, mesh.faces)
    # |cross| = 2 area, so summing cross directly is area-weighting
    acc = _scatter_faces(cross, mesh.faces, V)
    counts = np.bincount(mesh.faces.ravel(), minlength=V)
    if np.any(counts == 0):
        raise DataError(f"isolated vertex {int(np.flatnonzero(counts == 0)[0])} has no normal")
    norm = np.linalg.norm(acc, axis=1)
    scale = max(float(np.max(norm)), 1e-300)
    flagged = norm <= 1e-14 * scale
    normals = np.empty_like(acc)
    ok = ~flagged
    normals[ok] = acc[ok] / norm[ok, None]
    if np.any(flagged):
        fn = face_normals(mesh)
        first_face = np.full(V, -1, dtype=np.int64)
        flat = mesh.faces.ravel()
        order = np.arange(len(flat)) // 3
        # reverse so the earliest face wins
        first_face[flat[::-1]] = order[::-1]
        normals[flagged] = fn[first_face[flagged]]
        if np.any(np.linalg.norm(normals[flagged], axis=1) == 0):
            raise DataError("vertex normal undefined: all incident faces are degenerate")
    return normals, flagged


def vertex_normals(mesh: Mesh) -> np.ndarray:
    return vertex_normals_with_flags(mesh)[0]


# ---------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormalizationTransform:
    """``x -> (x + translation) * scale``. Translate first, then scale."""

    translation: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise DataError("normalization scale must be positive")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + self.translation) * self.scale

    def invert(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale - self.translation


def normalize_unit_cube(mesh: Mesh) -> Tuple[Mesh, NormalizationTransform]:
    """Center the bounding box at the origin and scale its longest side to 2."""
    lo, hi = mesh.bbox()
    extent = float(np.max(hi - lo))
    if not extent > 0:
        raise DataError("degenerate bounding box")
    t = NormalizationTransform(-(lo + hi) / 2.0, 2.0 / extent)
    return mesh.with_vertices(t.apply(mesh.vertices)), t


def restore_bbox_diagonal(deformed: Mesh, source: Mesh) -> Mesh:
    """Rescale ``deformed`` about its bbox center so its bbox diagonal matches ``source``."""
    return deformed.with_vertices(rescale_to_diagonal(deformed.vertices, source.bbox_diagonal()))


def rescale_to_diagonal(vertices: np.ndarray, diagonal: float) -> np.ndarray:
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    d = float(np.linalg.norm(hi - lo))
    if d == 0:
        raise DataError("deformed mesh has zero bounding-box diagonal")
    center = (lo + hi) / 2.0
    return center + (vertices - center) * (diagonal / d)


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Issue:
    kind: str
    index: int
    value: float


@dataclass
class ValidationReport:
    n_vertices: int
    n_faces: int
    n_components: int
    n_boundary_edges: int
    n_boundary_loops: int
    max_aspect_ratio: float
    issues: List[Issue] = field(default_factory=list)

    def count(self, kind: str) -> int:
        return sum(1 for i in self.issues if i.kind == kind)

    @property
    def manifold(self) -> bool:
        return self.count("non_manifold_edge") == 0

    @property
    def oriented(self) -> bool:
        return self.count("inconsistent_orientation") == 0

    @property
    def ok(self) -> bool:
        """Usable as a deformation source."""
        return (
            self.manifold
            and self.oriented
            and self.count("degenerate_face") == 0
            and self.count("multiple_boundary_loops") == 0
        )

    def to_text(self) -> str:
        lines = [
            f"vertices={self.n_vertices} faces={self.n_faces} components={self.n_components}",
            f"manifold={str(self.manifold).lower()} oriented={str(self.oriented).lower()}",
            f"boundary_edges={self.n_boundary_edges} boundary_loops={self.n_boundary_loops}",
            f"max_aspect_ratio={self.max_aspect_ratio:.6g}",
        ]
        for i in self.issues:
            lines.append(f"{i.kind} {i.index} {i.value:.6g}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["kind", "index", "value"])
        for i in self.issues:
            w.writerow([i.kind, i.index, repr(float(i.value))])
        return out.getvalue()


def aspect_ratios(mesh: Mesh) -> np.ndarray:
    """Longest edge over shortest altitude, scaled so an equilateral triangle gives 1."""
    v = mesh.vertices
    f = mesh.faces
    e = np.stack([v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 1]], v[f[:, 0]] - v[f[:, 2]]], axis=1)
    lmax2 = np.max(np.einsum("fij,fij->fi", e, e), axis=1)
    area = face_areas(mesh)
    with np.errstate(divide="ignore"):
        return np.where(area > 0, np.sqrt(3.0) * lmax2 / (4.0 * np.maximum(area, 1e-300)), np.inf)


def undirected_edges(faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unique sorted edges ``(E, 2)`` and, per face, the edge id opposite each corner ``(F, 3)``.

    Corner ``c`` of face ``(i, j, k)`` is opposite the edge joining the other two.
    """
    F = len(faces)
    # edge opposite corner 0 is (1, 2), corner 1 -> (2, 0), corner 2 -> (0, 1)
    a = faces[:, [1, 2, 0]].ravel()
    b = faces[:, [2, 0, 1]].ravel()
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    pairs = np.stack([lo, hi], axis=1)
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    return edges, inverse.reshape(F, 3)


def vertex_components(n_vertices: int, faces: np.ndarray) -> Tuple[int, np.ndarray]:
    rows = faces[:, [0, 1, 2]].ravel()
    cols = faces[:, [1, 2, 0]].ravel()
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices))
    return connected_components(adj, directed=False)


def validate(mesh: Mesh, aspect_threshold: float = 1e3) -> ValidationReport:
    """Report-only mesh checks; never raises on bad geometry."""
    issues: List[Issue] = []
    faces = mesh.faces
    V = mesh.n_vertices
    edges, face_edge = undirected_edges(faces)
    E = len(edges)
    edge_count = np.bincount(face_edge.ravel(), minlength=E)

    for e in np.flatnonzero(edge_count > 2):
        issues.append(Issue("non_manifold_edge", int(e), float(edge_count[e])))

    # an edge traversed twice in the same direction means flipped winding
    a = faces[:, [1, 2, 0]].ravel()
    b = faces[:, [2, 0, 1]].ravel()
    forward = (a < b).astype(np.int64)
    fwd_count = np.bincount(face_edge.ravel(), weights=forward, minlength=E)
    both = edge_count == 2
    bad_orient = both & (fwd_count != 1)
    for e in np.flatnonzero(bad_orient):
        issues.append(Issue("inconsistent_orientation", int(e), 2.0))

    area = face_areas(mesh)
    mean_area = float(area.mean())
    for fi in np.flatnonzero(area <= DEGENERATE_AREA_RTOL * mean_area):
        issues.append(Issue("degenerate_face", int(fi), float(area[fi])))

    ar = aspect_ratios(mesh)
    for fi in np.flatnonzero(ar > aspect_threshold):
        issues.append(Issue("high_aspect_ratio", int(fi), float(ar[fi])))

    used = np.bincount(faces.ravel(), minlength=V)
    for vi in np.flatnonzero(used == 0):
        issues.append(Issue("isolated_vertex", int(vi), 0.0))

    n_comp, labels = vertex_components(V, faces)

    boundary = edges[edge_count == 1]
    n_loops = 0
    if len(boundary):
        bverts = np.unique(boundary)
        remap = np.full(V, -1)
        remap[bverts] = np.arange(len(bverts))
        adj = coo_matrix(
            (np.ones(len(boundary)), (remap[boundary[:, 0]], remap[boundary[:, 1]])),
            shape=(len(bverts), len(bverts)),
        )
        n_loops, loop_labels = connected_components(adj, directed=False)
        loops_per_comp = np.bincount(labels[bverts[np.unique(loop_labels, return_index=True)[1]]], minlength=n_comp)
        for c in np.flatnonzero(loops_per_comp > 1):
            issues.append(Issue("multiple_boundary_loops", int(c), float(loops_per_comp[c])))

    if np.all(used > 0):
        try:
            _, flagged = vertex_normals_with_flags(mesh)
        except DataError:
            # every incident face degenerate; already reported above
            flagged = np.zeros(V, dtype=bool)
        for vi in np.flatnonzero(flagged):
            issues.append(Issue("zero_normal_fallback", int(vi), 0.0))

    finite_ar = ar[np.isfinite(ar)]
    return ValidationReport(
        n_vertices=V,
        n_faces=mesh.n_faces,
        n_components=int(n_comp),
        n_boundary_edges=int(len(boundary)),
        n_boundary_loops=int(n_loops),
        max_aspect_ratio=float(finite_ar.max()) if len(finite_ar) else float("inf"),
        issues=issues,
    )
