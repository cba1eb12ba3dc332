"""Procedural meshes used as fixtures and benchmark inputs."""

import numpy as np

from .mesh import Mesh


def tetrahedron() -> Mesh:
    """Regular tetrahedron inscribed in the unit sphere, outward CCW faces."""
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64) / np.sqrt(3.0)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return Mesh(v, f)


def icosahedron() -> Mesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return Mesh(v, f)


def icosphere(subdivisions: int = 3) -> Mesh:
    """Unit icosphere; ``10 * 4**n + 2`` vertices (642 at n=3)."""
    verts = [tuple(p) for p in icosahedron().vertices]
    faces = icosahedron().faces.tolist()
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
                verts.append(tuple(p / np.linalg.norm(p)))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return Mesh(np.asarray(verts), np.asarray(faces))


def bumpy_sphere(subdivisions: int = 5, amplitude: float = 0.15) -> Mesh:
    """Smooth star-shaped blob: an icosphere with a low-frequency radial displacement.

    At the default subdivision this has 10242 vertices and 20480 faces.
    """
    base = icosphere(subdivisions)
    p = base.vertices
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    r = 1.0 + amplitude * (np.sin(3.0 * x + 0.5) * np.cos(2.0 * y) + 0.6 * np.sin(2.5 * z + 1.0) * x)
    return Mesh(p * r[:, None] * np.array([1.0, 0.8, 1.2]), base.faces)


def torus(n_major: int = 64, n_minor: int = 32, major: float = 1.0, minor: float = 0.35) -> Mesh:
    """Closed torus with ``n_major * n_minor`` vertices and exactly twice as many faces."""
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    th = 2 * np.pi * i / n_major
    ph = 2 * np.pi * j / n_minor
    x = (major + minor * np.cos(ph)) * np.cos(th)
    y = (major + minor * np.cos(ph)) * np.sin(th)
    z = minor * np.sin(ph)
    v = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    idx = lambda a, b: (a % n_major) * n_minor + (b % n_minor)  # noqa: E731
    a = idx(i, j).ravel()
    b = idx(i + 1, j).ravel()
    c = idx(i + 1, j + 1).ravel()
    d = idx(i, j + 1).ravel()
    f = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return Mesh(v, f)


def grid(n: int = 8, m: int = None, jitter: float = 0.0, seed: int = 0) -> Mesh:
    """Flat ``n x m`` vertex grid on ``[0, 1]^2`` in the z=0 plane, normals +z."""
    m = n if m is None else m
    xs, ys = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, m), indexing="ij")
    v = np.stack([xs, ys, np.zeros_like(xs)], axis=-1).reshape(-1, 3)
    if jitter:
        rng = np.random.default_rng(seed)
        interior = np.ones((n, m), dtype=bool)
        interior[[0, -1], :] = False
        interior[:, [0, -1]] = False
        h = 1.0 / (max(n, m) - 1)
        v[interior.ravel(), :2] += rng.uniform(-jitter, jitter, size=(interior.sum(), 2)) * h
    i, j = np.meshgrid(np.arange(n - 1), np.arange(m - 1), indexing="ij")
    a = (i * m + j).ravel()
    b = ((i + 1) * m + j).ravel()
    c = ((i + 1) * m + j + 1).ravel()
    d = (i * m + j + 1).ravel()
    f = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return Mesh(v, f)


def split_cube(size: float = 2.0) -> Mesh:
    """Axis-aligned cube with each side a separate two-triangle patch.

    Corners are not shared, so every vertex normal is a coordinate axis.
    """
    h = size / 2.0
    verts, faces = [], []
    for axis in range(3):
        for sign in (1.0, -1.0):
            u, w = [(a) for a in range(3) if a != axis]
            quad = []
            for s, t in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                p = np.zeros(3)
                p[axis] = sign * h
                p[u] = s * h
                p[w] = t * h
                quad.append(p)
            base = len(verts)
            verts.extend(quad)
            tri = [[0, 1, 2], [0, 2, 3]]
            n = np.cross(quad[1] - quad[0], quad[2] - quad[0])
            if n[axis] * sign < 0:
                tri = [[0, 2, 1], [0, 3, 2]]
            faces.extend([[base + a, base + b, base + c] for a, b, c in tri])
    return Mesh(np.asarray(verts), np.asarray(faces))
