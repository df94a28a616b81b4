"""Point-wise filtering of a noisy cloud with a trained network."""

import logging
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np

from pointfilter.cloud import (
    NeighborIndex,
    PointCloud,
    bbox_diagonal,
    build_index,
    radius_neighbors,
)
from pointfilter.errors import ArgumentError, EmptyInputError
from pointfilter.network import NetworkParams, forward
from pointfilter.patches import (
    DEFAULT_PATCH_SIZE,
    DEFAULT_RADIUS_FRACTION,
    CanonicalPatchPair,
    canonicalize_noisy,
    decanonicalize_displacement,
)
from pointfilter.training import PRECISIONS, resolve_seed

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 64


@dataclass(frozen=True)
class FilterConfig:
    """
    Settings of a filtering run.

    Points are processed in chunks of `chunk_size`. Every point draws its
    downsampling choices from a stream keyed on the seed, the iteration and
    its own coordinates, so the output depends on neither `threads` nor the
    order of the input points.
    """

    iterations: int = 2
    patch_size: int = DEFAULT_PATCH_SIZE
    radius_fraction: float = DEFAULT_RADIUS_FRACTION
    deterministic: bool = False
    seed: int | None = None
    threads: int = 1
    chunk_size: int = DEFAULT_CHUNK_SIZE
    precision: str = "float32"

    def __post_init__(self):
        if self.iterations < 1:
            raise ArgumentError(f"iterations must be at least 1, got {self.iterations}")
        if self.patch_size < 1:
            raise ArgumentError(f"patch_size must be positive, got {self.patch_size}")
        if not self.radius_fraction > 0:
            raise ArgumentError(f"radius_fraction must be positive, got {self.radius_fraction}")
        if self.threads < 1 or self.chunk_size < 1:
            raise ArgumentError("threads and chunk_size must be positive")
        if self.precision not in PRECISIONS:
            raise ArgumentError(f"precision must be one of {', '.join(PRECISIONS)}, got {self.precision!r}")


@dataclass
class FilterSummary:
    """Counters aggregated over every iteration of a filtering run."""

    iterations: int = 0
    points: int = 0
    isolated: int = 0
    degenerate: int = 0


@dataclass
class FilterResult:
    cloud: PointCloud
    summary: FilterSummary


COORDINATE_KEY_STEPS = 2**20


def point_rng(seed: int, iteration: int, center: np.ndarray, radius: float) -> np.random.Generator:
    """
    Downsampling stream of the point at `center` in pass `iteration`.

    The center is quantized to radius / COORDINATE_KEY_STEPS before keying,
    so last-bit differences between batched and single-point passes map to
    the same stream.
    """
    cells = np.floor(np.asarray(center, dtype=np.float64) * (COORDINATE_KEY_STEPS / radius)).astype(np.int64)
    key = cells.view(np.uint64).tolist()
    return np.random.default_rng(np.random.SeedSequence([seed, iteration, *key]))


def _patch_around(
    positions: np.ndarray,
    index: NeighborIndex,
    i: int,
    radius: float,
    patch_size: int,
    seed: int,
    iteration: int,
) -> CanonicalPatchPair | None:
    center = positions[i]
    neighbors = radius_neighbors(index, center, radius)
    # The query point always finds itself; anything less is an isolated point.
    if len(neighbors) < 2:
        return None
    points = index.points[neighbors]
    # Coordinate order, so the sampled subset never depends on point ids.
    points = points[np.lexsort(points.T[::-1])]
    return canonicalize_noisy(center, points, radius, patch_size, point_rng(seed, iteration, center, radius))


def filter_point(
    params: NetworkParams,
    noisy: PointCloud,
    index: NeighborIndex,
    i: int,
    config: FilterConfig | None = None,
    radius: float | None = None,
    iteration: int = 0,
) -> np.ndarray:
    """
    Filtered position of point `i`: center + r * R^T * f(canonical patch).

    Args:
        params: Trained network parameters.
        noisy: Cloud holding the point.
        index: Neighbor index over `noisy`.
        i: Index of the point to filter.
        config: Patch settings; defaults to FilterConfig().
        radius: Patch radius; defaults to radius_fraction times the cloud's diagonal.
        iteration: Filtering pass the downsampling stream is keyed on.

    Returns:
        The filtered 3-vector. Isolated points are returned unchanged.
    """
    config = config or FilterConfig()
    if not 0 <= i < len(noisy):
        raise ArgumentError(f"point index {i} out of range")
    radius = config.radius_fraction * bbox_diagonal(noisy) if radius is None else radius
    seed = resolve_seed(config.seed, config.deterministic)

    patch = _patch_around(noisy.positions, index, i, radius, config.patch_size, seed, iteration)
    if patch is None:
        logger.debug("point %d has no neighbors within %g", i, radius)
        return noisy.positions[i].copy()
    d, _ = forward(params, patch.noisy_points, mode="infer")
    return noisy.positions[i] + decanonicalize_displacement(d.astype(np.float64), patch)


def _filter_chunk(
    params: NetworkParams,
    positions: np.ndarray,
    index: NeighborIndex,
    radius: float,
    patch_size: int,
    seed: int,
    iteration: int,
    out: np.ndarray,
    ids: range,
) -> tuple[int, int]:
    patches, rows = [], []
    isolated = 0
    for i in ids:
        patch = _patch_around(positions, index, i, radius, patch_size, seed, iteration)
        if patch is None:
            out[i] = positions[i]
            isolated += 1
            continue
        patches.append(patch)
        rows.append(i)
    if patches:
        displacements, _ = forward(params, np.stack([p.noisy_points for p in patches]), mode="infer")
        for i, d, patch in zip(rows, displacements.astype(np.float64), patches):
            out[i] = positions[i] + decanonicalize_displacement(d, patch)
    return isolated, sum(patch.degenerate for patch in patches)


def filter_cloud(
    params: NetworkParams,
    noisy: PointCloud,
    config: FilterConfig | None = None,
    on_iteration: Callable[[int, FilterSummary], None] | None = None,
) -> FilterResult:
    """
    Filter every point of a cloud, repeating the whole pass `iterations` times.

    The patch radius is fixed from the input cloud's bounding box. Each
    iteration rebuilds the neighbor index from the previous iteration's
    output and filters all points against that snapshot.

    Raises:
        EmptyInputError: If the cloud has no points.
    """
    config = config or FilterConfig()
    if len(noisy) == 0:
        raise EmptyInputError("cannot filter an empty cloud")
    params = params.astype(PRECISIONS[config.precision])
    seed = resolve_seed(config.seed, config.deterministic)
    radius = config.radius_fraction * bbox_diagonal(noisy)
    summary = FilterSummary(points=len(noisy))

    current = noisy.positions.copy()
    n = len(current)
    chunks = [range(start, min(start + config.chunk_size, n)) for start in range(0, n, config.chunk_size)]

    for iteration in range(config.iterations):
        index = build_index(PointCloud(current))
        out = np.empty_like(current)
        run = partial(_filter_chunk, params, current, index, radius, config.patch_size, seed, iteration, out)
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            counts = list(pool.map(run, chunks))

        isolated = sum(c[0] for c in counts)
        degenerate = sum(c[1] for c in counts)
        summary.iterations += 1
        summary.isolated += isolated
        summary.degenerate += degenerate
        if isolated:
            logger.warning("iteration %d: %d isolated points left unchanged", iteration, isolated)
        logger.info("iteration %d: %d points filtered, %d identity-aligned patches", iteration, n - isolated, degenerate)
        current = out
        if on_iteration is not None:
            on_iteration(iteration, summary)

    return FilterResult(PointCloud(current), summary)
