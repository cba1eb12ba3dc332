"""Evaluation statistics: face-area ratios, displacements, and axis deviation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DataError
from .mesh import Mesh, face_areas, face_normals, normalize_unit_cube, restore_bbox_diagonal

HIST_BINS = 60
HIST_MAX = 3.0


@dataclass
class AreaRatioStats:
    mean: float
    std_dev: float  # population standard deviation
    histogram: List[Tuple[float, float, int]]
    n_faces: int

    def stats_csv(self) -> str:
        return f"mean,std,n\n{self.mean!r},{self.std_dev!r},{self.n_faces}\n"

    def histogram_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in self.histogram:
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        return out.getvalue()


def normalized_pair(source: Mesh, deformed: Mesh) -> Tuple[Mesh, Mesh]:
    """Fit the source into a side-2 cube, move the deformed mesh with it, then match bbox diagonals."""
    src_n, t = normalize_unit_cube(source)
    deformed_n = deformed.with_vertices(t.apply(deformed.vertices))
    return src_n, restore_bbox_diagonal(deformed_n, src_n)


def _check_pair(source: Mesh, deformed: Mesh):
    if source.n_vertices != deformed.n_vertices or not np.array_equal(source.faces, deformed.faces):
        raise DataError("source and deformed meshes must share connectivity")


def area_ratios(source: Mesh, deformed: Mesh) -> np.ndarray:
    _check_pair(source, deformed)
    a0 = face_areas(source)
    if np.any(a0 <= 0):
        raise DataError(f"source face {int(np.flatnonzero(a0 <= 0)[0])} has zero area")
    return face_areas(deformed) / a0


def _ratio_histogram(r: np.ndarray, bins: int, upper: float):
    counts, edges = np.histogram(np.clip(r, 0, None), bins=bins, range=(0.0, upper))
    # np.histogram puts r == upper in the last bin; anything above goes to overflow
    hist = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
    over = int(np.sum(r > upper))
    if over:
        hist.append((upper, float(r.max()), over))
    return hist


def _stats_from_ratios(r: np.ndarray, bins: int, upper: float) -> AreaRatioStats:
    return AreaRatioStats(float(np.mean(r)), float(np.std(r)), _ratio_histogram(r, bins, upper), int(len(r)))


def _check_normalized(source: Mesh, deformed: Mesh, tol: float = 1e-9):
    lo, hi = source.bbox()
    ext = hi - lo
    if abs(float(ext.max()) - 2.0) > tol or np.any(np.abs(lo + hi) > tol):
        raise DataError("source is not normalized to a side-2 cube at the origin")
    if abs(deformed.bbox_diagonal() - source.bbox_diagonal()) > tol * source.bbox_diagonal():
        raise DataError("deformed mesh does not share the source bbox diagonal")


def area_ratio_stats(source: Mesh, deformed: Mesh, bins: int = HIST_BINS, upper: float = HIST_MAX, check: bool = True) -> AreaRatioStats:
    """Per-face deformed/source area ratio: mean, population std and a fixed-width histogram.

    Expects both meshes already normalized (see ``normalized_pair``); with
    ``check`` this is verified rather than re-applied.
    """
    _check_pair(source, deformed)
    if check:
        _check_normalized(source, deformed)
    return _stats_from_ratios(area_ratios(source, deformed), bins, upper)


def pooled_area_ratio_stats(pairs: Sequence[Tuple[Mesh, Mesh]], bins: int = HIST_BINS, upper: float = HIST_MAX, check: bool = True) -> AreaRatioStats:
    """Unweighted statistics over all faces of all pairs together."""
    rs = []
    for s, d in pairs:
        _check_pair(s, d)
        if check:
            _check_normalized(s, d)
        rs.append(area_ratios(s, d))
    return _stats_from_ratios(np.concatenate(rs), bins, upper)


def displacement_stats(source: Mesh, deformed: Mesh):
    """Euclidean per-vertex displacement: ``(mean, max, per_vertex)``."""
    if source.n_vertices != deformed.n_vertices:
        raise DataError("meshes have different vertex counts")
    d = np.linalg.norm(deformed.vertices - source.vertices, axis=1)
    return float(d.mean()), float(d.max()), d


def axis_deviation(mesh: Mesh) -> float:
    """Area-weighted mean angle between face normals and their nearest signed axis (radians)."""
    a = face_areas(mesh)
    if np.any(a <= 0):
        raise DataError("axis deviation needs nonzero face areas")
    n = face_normals(mesh)
    ang = np.arccos(np.clip(np.max(np.abs(n), axis=1), -1.0, 1.0))
    return float(np.sum(a * ang) / np.sum(a))
