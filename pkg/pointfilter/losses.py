"""
Training objectives evaluated in the canonical patch frame.

The noisy query point sits at the origin of its canonical patch, so the
filtered point is the predicted displacement `d` itself. Every loss returns
its value and its exact gradient with respect to `d`.
"""

import math
from dataclasses import dataclass

import numpy as np

from pointfilter.errors import ArgumentError
from pointfilter.patches import CanonicalPatchPair

LOSS_KINDS = ("l2", "proj_a", "proj_b")

# Below this kernel width the spatial weights collapse to uniform.
DEGENERATE_KERNEL = 1e-12

NORMAL_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LossParams:
    """Repulsion mixing weight `eta` and normal support angle `sigma_n` in degrees."""

    eta: float = 0.97
    sigma_n: float = 15.0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ArgumentError(f"eta must be within [0, 1], got {self.eta}")
        if not 0.0 < self.sigma_n < 90.0:
            raise ArgumentError(f"sigma_n must be within (0, 90) degrees, got {self.sigma_n}")


@dataclass(frozen=True, eq=False)
class LossTerms:
    projection: float
    repulsion: float
    total: float
    grad_wrt_displacement: np.ndarray


def _clean_arrays(clean_patch: CanonicalPatchPair) -> tuple[np.ndarray, np.ndarray]:
    points = np.asarray(clean_patch.clean_points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ArgumentError("clean patch is empty")
    normals = np.asarray(clean_patch.clean_normals, dtype=np.float64).reshape(-1, 3)
    return points, normals


def _displacement(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (3,):
        raise ArgumentError(f"displacement must be a 3-vector, got shape {d.shape}")
    return d


def sigma_p(clean_patch: CanonicalPatchPair, m: int | None = None) -> float:
    """
    Spatial kernel width 4 * sqrt(diag / m).

    `diag` is the bounding-box diagonal of the clean patch in the canonical
    frame and `m` the noisy patch size (defaults to the patch's own size).
    """
    points, _ = _clean_arrays(clean_patch)
    m = clean_patch.patch_size if m is None else m
    if m < 1:
        raise ArgumentError(f"noisy patch size must be positive, got {m}")
    diag = float(np.linalg.norm(np.ptp(points, axis=0)))
    return 4.0 * math.sqrt(diag / m)


def spatial_weight(d, sigma_p: float):
    """Gaussian exp(-d^2 / sigma_p^2); `d` may be a scalar or an array of distances."""
    if not sigma_p > 0:
        raise ArgumentError(f"sigma_p must be positive, got {sigma_p}")
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-(d * d) / (sigma_p * sigma_p))


def _log_normal_weight(n_filtered: np.ndarray, n_gt: np.ndarray, sigma_n: float) -> np.ndarray:
    return -(1.0 - n_gt @ n_filtered) / (1.0 - math.cos(math.radians(sigma_n)))


def normal_weight(n_filtered, n_gt, sigma_n: float):
    """
    Normal similarity exp(-(1 - n . n') / (1 - cos sigma_n)).

    `n_gt` may hold one normal or a stack of normals.

    Raises:
        ArgumentError: If any normal deviates from unit length by more than 1e-6.
    """
    n_filtered = np.asarray(n_filtered, dtype=np.float64)
    n_gt = np.asarray(n_gt, dtype=np.float64)
    for normals in (n_filtered.reshape(-1, 3), n_gt.reshape(-1, 3)):
        if np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > NORMAL_TOLERANCE):
            raise ArgumentError("normals must have unit length")
    return np.exp(_log_normal_weight(n_filtered, n_gt, sigma_n))


def assign_filtered_normal(p_filtered, clean_patch: CanonicalPatchPair) -> np.ndarray:
    """Normal of the clean point nearest to `p_filtered` (lowest index on ties)."""
    points, normals = _clean_arrays(clean_patch)
    diff = points - np.asarray(p_filtered, dtype=np.float64)
    return normals[int(np.argmin(np.einsum("ij,ij->i", diff, diff)))]


def _weighted_projection(d: np.ndarray, points: np.ndarray, normals: np.ndarray, log_weights, kernel: float):
    diff = d - points
    projections = np.einsum("ij,ij->i", diff, normals)
    distances = np.abs(projections)

    if kernel > DEGENERATE_KERNEL:
        log_weights = log_weights - np.einsum("ij,ij->i", diff, diff) / (kernel * kernel)
        grad_log_weights = (-2.0 / (kernel * kernel)) * diff
    else:
        grad_log_weights = np.zeros_like(diff)

    weights = np.exp(log_weights - np.max(log_weights))
    total_weight = weights.sum()
    value = float(weights @ distances / total_weight)

    grad = (weights * np.sign(projections)) @ normals
    grad += (weights * (distances - value)) @ grad_log_weights
    return value, grad / total_weight


def loss_proj_a(d, clean_patch: CanonicalPatchPair, params: LossParams | None = None) -> LossTerms:
    """
    Spatially weighted mean distance from `d` to the clean tangent planes.

    The weights exp(-|d - p_j|^2 / sigma_p^2) are differentiated along with
    the projections; a zero projection contributes a zero subgradient.
    """
    d = _displacement(d)
    points, normals = _clean_arrays(clean_patch)
    value, grad = _weighted_projection(d, points, normals, np.zeros(len(points)), sigma_p(clean_patch))
    return LossTerms(value, 0.0, value, grad)


def loss_proj_b(d, clean_patch: CanonicalPatchPair, params: LossParams | None = None) -> LossTerms:
    """
    Bilateral variant of `loss_proj_a`.

    Each spatial weight is multiplied by the normal similarity between the
    clean normal and the normal assigned to `d`. The assignment is frozen for
    the gradient.
    """
    params = params or LossParams()
    d = _displacement(d)
    points, normals = _clean_arrays(clean_patch)
    assigned = assign_filtered_normal(d, clean_patch)
    log_theta = _log_normal_weight(assigned, normals, params.sigma_n)
    value, grad = _weighted_projection(d, points, normals, log_theta, sigma_p(clean_patch))
    return LossTerms(value, 0.0, value, grad)


def loss_rep(d, clean_patch: CanonicalPatchPair) -> LossTerms:
    """Largest distance from `d` to a clean point; ties go to the lowest index."""
    d = _displacement(d)
    points, _ = _clean_arrays(clean_patch)
    diff = d - points
    distances = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    j = int(np.argmax(distances))
    value = float(distances[j])
    grad = diff[j] / value if value > 0 else np.zeros(3)
    return LossTerms(0.0, value, value, grad)


def loss_l2(d, clean_patch: CanonicalPatchPair) -> LossTerms:
    """Squared distance from `d` to the nearest clean point."""
    d = _displacement(d)
    points, _ = _clean_arrays(clean_patch)
    diff = d - points
    squared = np.einsum("ij,ij->i", diff, diff)
    j = int(np.argmin(squared))
    return LossTerms(float(squared[j]), 0.0, float(squared[j]), 2.0 * diff[j])


_PROJECTIONS = {
    "l2": lambda d, patch, params: loss_l2(d, patch),
    "proj_a": loss_proj_a,
    "proj_b": loss_proj_b,
}


def total_loss(d, clean_patch: CanonicalPatchPair, params: LossParams | None = None, kind: str = "proj_b") -> LossTerms:
    """eta * projection + (1 - eta) * repulsion for the chosen projection kind."""
    if kind not in _PROJECTIONS:
        raise ArgumentError(f"unknown loss kind {kind!r}; expected one of {', '.join(LOSS_KINDS)}")
    params = params or LossParams()
    projection = _PROJECTIONS[kind](d, clean_patch, params)
    repulsion = loss_rep(d, clean_patch)
    eta = params.eta
    return LossTerms(
        projection=projection.projection,
        repulsion=repulsion.repulsion,
        total=eta * projection.projection + (1.0 - eta) * repulsion.repulsion,
        grad_wrt_displacement=eta * projection.grad_wrt_displacement
        + (1.0 - eta) * repulsion.grad_wrt_displacement,
    )
