import functools

import numpy as np
import pytest

from darap import kernels, shapes
from darap.mesh import Mesh
from darap.operators import build_operators


@functools.lru_cache(maxsize=None)
def fixture_mesh(name):
    return {
        "tetrahedron": shapes.tetrahedron,
        "icosphere2": lambda: shapes.icosphere(2),
        "icosphere3": lambda: shapes.icosphere(3),
        "grid": lambda: shapes.grid(7, 6, jitter=0.2, seed=3),
        "torus": lambda: shapes.torus(12, 8),
        "split_cube": shapes.split_cube,
        "bumpy": lambda: shapes.bumpy_sphere(5),
    }[name]()


@functools.lru_cache(maxsize=None)
def fixture_ops(name):
    return build_operators(fixture_mesh(name))


# everything at most 500 vertices
SMALL = ["tetrahedron", "icosphere2", "grid", "torus", "split_cube"]


@pytest.fixture(params=SMALL)
def small(request):
    return fixture_mesh(request.param), fixture_ops(request.param)


@pytest.fixture(params=kernels.available())
def backend(request):
    return request.param


def random_rotations(rng, n):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


def rotated(mesh: Mesh, Q, shift=None):
    v = mesh.vertices @ Q.T
    if shift is not None:
        v = v + shift
    return mesh.with_vertices(v)
