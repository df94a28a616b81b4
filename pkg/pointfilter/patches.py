"""Patch extraction and canonicalization around noisy query points."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pointfilter.cloud import NeighborIndex, PointCloud, radius_neighbors, save_cloud
from pointfilter.errors import (
    ArgumentError,
    DegenerateGeometryError,
    DegeneratePatchError,
)

logger = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = 500
DEFAULT_RADIUS_FRACTION = 0.05

# Eigenvalues closer than this are treated as a tie.
EIGEN_TIE = 1e-12


@dataclass(frozen=True, eq=False)
class RawPatchPair:
    """Noisy and clean neighborhoods of one noisy point, in model units."""

    center: np.ndarray
    noisy_points: np.ndarray
    clean_points: np.ndarray
    clean_normals: np.ndarray
    radius: float


@dataclass(frozen=True, eq=False)
class CanonicalPatchPair:
    """
    A patch pair in the normalized, PCA-aligned frame.

    `noisy_points` always has exactly `patch_size` rows; the last `pad_count`
    rows are origin padding. Clean arrays may be empty at inference time.
    `degenerate` marks patches that fell back to the identity rotation.
    """

    noisy_points: np.ndarray
    pad_count: int
    clean_points: np.ndarray
    clean_normals: np.ndarray
    rotation: np.ndarray
    radius: float
    center: np.ndarray
    degenerate: bool = False

    @property
    def patch_size(self) -> int:
        return len(self.noisy_points)


def extract_patch_pair(
    noisy: PointCloud,
    clean: PointCloud,
    center_index: int,
    r: float,
    indices: tuple[NeighborIndex, NeighborIndex],
) -> RawPatchPair:
    """
    Collect the noisy and clean points strictly within `r` of a noisy point.

    Args:
        noisy: Noisy cloud holding the query point.
        clean: Ground-truth cloud with normals.
        center_index: Index of the query point in `noisy`.
        r: Patch radius in model units.
        indices: Neighbor indexes built over (noisy, clean).

    Raises:
        ArgumentError: If `clean` has no normals or the arguments are out of range.
        DegeneratePatchError: If no clean point lies within `r`.
    """
    if clean.normals is None:
        raise ArgumentError("ground-truth cloud needs normals")
    if not r > 0:
        raise ArgumentError(f"patch radius must be positive, got {r}")
    if not 0 <= center_index < len(noisy):
        raise ArgumentError(f"center index {center_index} out of range")

    noisy_index, clean_index = indices
    center = noisy.positions[center_index]
    noisy_ids = radius_neighbors(noisy_index, center, r)
    clean_ids = radius_neighbors(clean_index, center, r)
    if len(clean_ids) == 0:
        raise DegeneratePatchError(f"no ground-truth points within {r:g} of point {center_index}")

    return RawPatchPair(
        center=center.copy(),
        noisy_points=noisy.positions[noisy_ids],
        clean_points=clean.positions[clean_ids],
        clean_normals=clean.normals[clean_ids],
        radius=float(r),
    )


def _orient(axis: np.ndarray, points: np.ndarray) -> np.ndarray:
    # Third moment along the axis picks the sign; world-axis rule only on a tie.
    projections = points @ axis
    moment = float(np.sum(projections**3))
    scale = float(np.sum(np.abs(projections) ** 3))
    if abs(moment) > 1e-12 * scale:
        return axis if moment > 0 else -axis
    return axis if axis[np.argmax(np.abs(axis))] > 0 else -axis


def pca_rotation(points: np.ndarray) -> np.ndarray:
    """
    Rotation aligning a patch's principal axes with the coordinate axes.

    The covariance is taken about the origin (the query point). The row
    mapping the smallest-variance eigenvector goes to z, the middle one to x,
    and y is z cross x, so the result is proper orthonormal.

    Raises:
        DegenerateGeometryError: With fewer than 3 points or tied smallest
            eigenvalues; `fallback` on the error is the identity.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 3:
        raise DegenerateGeometryError(f"need at least 3 points, got {len(points)}")

    covariance = points.T @ points / len(points)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    if eigenvalues[1] - eigenvalues[0] <= EIGEN_TIE:
        raise DegenerateGeometryError("smallest principal axes are not separable")

    z_axis = _orient(eigenvectors[:, 0], points)
    x_axis = _orient(eigenvectors[:, 1], points)
    y_axis = np.cross(z_axis, x_axis)
    return np.stack([x_axis, y_axis, z_axis])


def _frame(points: np.ndarray, center: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray, bool]:
    scaled = (points - center) / r
    try:
        rotation = pca_rotation(scaled)
        degenerate = False
    except DegenerateGeometryError as e:
        logger.debug("identity alignment for patch at %s: %s", center, e)
        rotation = e.fallback
        degenerate = True
    return scaled, rotation, degenerate


def _downsample(points: np.ndarray, limit: int, rng: np.random.Generator) -> np.ndarray:
    if len(points) <= limit:
        return points
    keep = np.sort(rng.choice(len(points), size=limit, replace=False))
    return points[keep]


def _fixed_size(points: np.ndarray, patch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    points = _downsample(points, patch_size, rng)
    pad_count = patch_size - len(points)
    if pad_count:
        points = np.vstack([points, np.zeros((pad_count, 3))])
    return points, pad_count


def canonicalize(
    raw: RawPatchPair,
    patch_size: int = DEFAULT_PATCH_SIZE,
    rng: np.random.Generator | None = None,
) -> CanonicalPatchPair:
    """
    Map a raw patch pair into the canonical frame.

    Both patches are translated by -center and scaled by 1/r, then rotated
    by the PCA rotation of the scaled noisy patch. The noisy patch is
    downsampled without replacement or origin-padded to exactly
    `patch_size` rows; the clean patch is only ever downsampled.
    """
    if patch_size < 1:
        raise ArgumentError(f"patch size must be positive, got {patch_size}")
    rng = rng if rng is not None else np.random.default_rng()

    noisy_scaled, rotation, degenerate = _frame(raw.noisy_points, raw.center, raw.radius)
    clean_scaled = (raw.clean_points - raw.center) / raw.radius

    noisy_points, pad_count = _fixed_size(noisy_scaled @ rotation.T, patch_size, rng)
    clean_rows = np.arange(len(clean_scaled))
    clean_rows = _downsample(clean_rows, patch_size, rng)

    return CanonicalPatchPair(
        noisy_points=noisy_points,
        pad_count=pad_count,
        clean_points=clean_scaled[clean_rows] @ rotation.T,
        clean_normals=raw.clean_normals[clean_rows] @ rotation.T,
        rotation=rotation,
        radius=raw.radius,
        center=raw.center,
        degenerate=degenerate,
    )


def canonicalize_noisy(
    center: np.ndarray,
    noisy_points: np.ndarray,
    r: float,
    patch_size: int = DEFAULT_PATCH_SIZE,
    rng: np.random.Generator | None = None,
) -> CanonicalPatchPair:
    """Canonicalize a noisy patch alone, as done at inference time."""
    raw = RawPatchPair(
        center=np.asarray(center, dtype=np.float64),
        noisy_points=np.asarray(noisy_points, dtype=np.float64).reshape(-1, 3),
        clean_points=np.empty((0, 3)),
        clean_normals=np.empty((0, 3)),
        radius=float(r),
    )
    return canonicalize(raw, patch_size, rng)


def decanonicalize_displacement(d: np.ndarray, patch: CanonicalPatchPair) -> np.ndarray:
    """World-space displacement r * R^-1 * d for a canonical displacement `d`."""
    return patch.radius * (patch.rotation.T @ np.asarray(d, dtype=np.float64))


def save_patch(patch: CanonicalPatchPair, directory: Path | str, stem: str = "patch") -> tuple[Path, Path]:
    """Dump a canonical patch as two cloud files for inspection."""
    directory = Path(directory)
    noisy_path = directory / f"{stem}_noisy.xyz"
    clean_path = directory / f"{stem}_clean.xyz"
    save_cloud(PointCloud(patch.noisy_points), noisy_path)
    normals = patch.clean_normals if len(patch.clean_points) else None
    save_cloud(PointCloud(patch.clean_points, normals), clean_path)
    return noisy_path, clean_path
