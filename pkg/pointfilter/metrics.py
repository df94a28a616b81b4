"""Evaluation metrics: neighborhood MSE, Chamfer distance and point-to-surface distance."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from pointfilter.cloud import (
    PointCloud,
    TriangleMesh,
    build_index,
    closest_points_on_triangles,
    nearest_many,
    triangle_areas,
)
from pointfilter.errors import ArgumentError, WriteError

DEFAULT_MSE_NEIGHBORS = 10


@dataclass(frozen=True, eq=False)
class MetricReport:
    cd: float
    mse: float
    p2f: float | None = None
    per_point_mse: np.ndarray | None = None

    def format(self) -> str:
        """Single-line `key=value` record."""
        fields = [f"cd={self.cd:.9g}", f"mse={self.mse:.9g}"]
        if self.p2f is not None:
            fields.append(f"p2f={self.p2f:.9g}")
        return " ".join(fields)


def _require_points(*clouds: PointCloud) -> None:
    for cloud in clouds:
        if len(cloud) == 0:
            raise ArgumentError("metrics need non-empty clouds")


def mse_metric(clean: PointCloud, filtered: PointCloud, m: int = DEFAULT_MSE_NEIGHBORS) -> tuple[float, np.ndarray]:
    """
    Mean over clean points of the mean squared distance to their `m` nearest filtered points.

    Returns:
        Tuple of (overall value, per-clean-point values).

    Raises:
        ArgumentError: If a cloud is empty or `m` is not in [1, len(filtered)].
    """
    _require_points(clean, filtered)
    if not 1 <= m <= len(filtered):
        raise ArgumentError(f"M must be in [1, {len(filtered)}], got {m}")
    _, squared = nearest_many(build_index(filtered), clean.positions, m)
    per_point = squared.mean(axis=1)
    return float(per_point.mean()), per_point


def chamfer(clean: PointCloud, filtered: PointCloud) -> float:
    """Symmetric Chamfer distance in squared-distance units."""
    _require_points(clean, filtered)
    _, forward_sq = nearest_many(build_index(filtered), clean.positions, 1)
    _, backward_sq = nearest_many(build_index(clean), filtered.positions, 1)
    return float(forward_sq.mean() + backward_sq.mean())


def _check_mesh(mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(mesh.triangles) == 0:
        raise ArgumentError("mesh has no triangles")
    a, b, c = mesh.corners()
    if np.any(triangle_areas(a, b, c) <= 0.0):
        raise ArgumentError("mesh contains zero-area triangles")
    return a, b, c


def point_surface_distances(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """
    Distance from each point to the nearest triangle of `mesh`.

    Triangles are culled with a KD-tree over their centroids: the nearest
    centroid bounds the answer from above, so only triangles whose centroid
    lies within that bound plus the largest centroid-to-corner radius can win.
    """
    a, b, c = _check_mesh(mesh)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centroids = (a + b + c) / 3.0
    reach = float(np.max(np.linalg.norm(np.stack([a, b, c]) - centroids, axis=-1)))
    tree = cKDTree(centroids)

    upper, _ = tree.query(points, k=1)
    candidates = tree.query_ball_point(points, upper + reach + 1e-12)

    distances = np.empty(len(points))
    for row, (p, ids) in enumerate(zip(points, candidates)):
        ids = np.asarray(ids, dtype=np.int64)
        closest = closest_points_on_triangles(p, a[ids], b[ids], c[ids])
        distances[row] = np.sqrt(np.min(np.einsum("ij,ij->i", closest - p, closest - p)))
    return distances


def p2f(filtered: PointCloud, mesh: TriangleMesh) -> float:
    """Mean point-to-surface distance of `filtered` against a ground-truth mesh."""
    _require_points(filtered)
    return float(point_surface_distances(filtered.positions, mesh).mean())


def evaluate(
    clean: PointCloud,
    filtered: PointCloud,
    mesh: TriangleMesh | None = None,
    m: int = DEFAULT_MSE_NEIGHBORS,
) -> MetricReport:
    mse, per_point = mse_metric(clean, filtered, m)
    return MetricReport(
        cd=chamfer(clean, filtered),
        mse=mse,
        p2f=p2f(filtered, mesh) if mesh is not None else None,
        per_point_mse=per_point,
    )


def save_error_map(clean: PointCloud, per_point_mse: np.ndarray, path: Path | str) -> None:
    """Write `x y z error` lines, one per clean point, for external heat-map rendering."""
    per_point_mse = np.asarray(per_point_mse, dtype=np.float64).reshape(-1)
    if len(per_point_mse) != len(clean):
        raise ArgumentError(f"{len(per_point_mse)} errors for {len(clean)} points")
    try:
        np.savetxt(path, np.column_stack([clean.positions, per_point_mse]), fmt="%.17g")
    except OSError as e:
        raise WriteError(f"cannot write {path}: {e}")
