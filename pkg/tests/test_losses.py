"""Tests for the training losses, against direct-summation oracles and finite differences."""

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from pointfilter.errors import ArgumentError
from pointfilter.losses import (
    LossParams,
    assign_filtered_normal,
    loss_l2,
    loss_proj_a,
    loss_proj_b,
    loss_rep,
    normal_weight,
    sigma_p,
    spatial_weight,
    total_loss,
)
from pointfilter.patches import CanonicalPatchPair


def make_patch(points, normals, m: int = 16) -> CanonicalPatchPair:
    return CanonicalPatchPair(
        noisy_points=np.zeros((m, 3)),
        pad_count=0,
        clean_points=np.asarray(points, dtype=float).reshape(-1, 3),
        clean_normals=np.asarray(normals, dtype=float).reshape(-1, 3),
        rotation=np.eye(3),
        radius=1.0,
        center=np.zeros(3),
    )


def random_patch(rng: np.random.Generator, count: int = 16, m: int = 16) -> CanonicalPatchPair:
    points = rng.uniform(-0.8, 0.8, size=(count, 3)) * [1.0, 1.0, 0.2]
    normals = rng.normal(size=(count, 3)) * [0.3, 0.3, 1.0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return make_patch(points, normals, m)


# Direct-summation oracles, written independently of the vectorized code.

def oracle_sigma_p(patch):
    lo, hi = patch.clean_points.min(axis=0), patch.clean_points.max(axis=0)
    return 4.0 * math.sqrt(math.sqrt(sum((h - l) ** 2 for l, h in zip(lo, hi))) / patch.patch_size)


def oracle_projection(d, patch, sigma_n=None):
    sp = oracle_sigma_p(patch)
    nearest = min(range(len(patch.clean_points)), key=lambda j: (sum((d - patch.clean_points[j]) ** 2), j))
    assigned = patch.clean_normals[nearest]
    numerator = denominator = 0.0
    for p, n in zip(patch.clean_points, patch.clean_normals):
        diff = d - p
        weight = math.exp(-float(diff @ diff) / (sp * sp))
        if sigma_n is not None:
            weight *= math.exp(-(1.0 - float(assigned @ n)) / (1.0 - math.cos(math.radians(sigma_n))))
        numerator += weight * abs(float(diff @ n))
        denominator += weight
    return numerator / denominator


def oracle_rep(d, patch):
    return max(math.sqrt(float((d - p) @ (d - p))) for p in patch.clean_points)


def oracle_l2(d, patch):
    return min(float((d - p) @ (d - p)) for p in patch.clean_points)


def central_difference(f, d, eps=1e-5):
    grad = np.zeros(3)
    for k in range(3):
        step = np.zeros(3)
        step[k] = eps
        grad[k] = (f(d + step) - f(d - step)) / (2 * eps)
    return grad


def test_sigma_p_values():
    """Test the kernel width formula on hand-built patches."""
    two = make_patch([[0, 0, 0], [2 / math.sqrt(3)] * 3], [[0, 0, 1]] * 2, m=500)
    assert sigma_p(two) == pytest.approx(4 * math.sqrt(2 / 500))
    assert sigma_p(two) == pytest.approx(0.25298, abs=1e-5)

    diag_equals_m = make_patch([[0, 0, 0], [3.0, 4.0, 0.0]], [[0, 0, 1]] * 2, m=5)
    assert sigma_p(diag_equals_m) == pytest.approx(4.0)

    assert sigma_p(make_patch([[0.1, 0.2, 0.3]], [[0, 0, 1]])) == 0.0
    with pytest.raises(ArgumentError):
        sigma_p(make_patch(np.empty((0, 3)), np.empty((0, 3))))


def test_spatial_weight():
    """Test the Gaussian spatial weight."""
    assert spatial_weight(0.0, 0.3) == 1.0
    assert spatial_weight(0.3, 0.3) == pytest.approx(math.exp(-1))
    values = spatial_weight(np.linspace(0, 1, 20), 0.3)
    assert np.all(np.diff(values) < 0)
    with pytest.raises(ArgumentError):
        spatial_weight(0.1, 0.0)


def test_normal_weight():
    """Test the normal similarity weight."""
    n = np.array([0.0, 0.0, 1.0])
    assert normal_weight(n, n, 15.0) == 1.0

    angle = math.radians(15.0)
    tilted = np.array([math.sin(angle), 0.0, math.cos(angle)])
    assert normal_weight(n, tilted, 15.0) == pytest.approx(math.exp(-1))

    opposite = normal_weight(n, -n, 15.0)
    assert opposite == pytest.approx(math.exp(-2 / (1 - math.cos(angle))))
    assert opposite == pytest.approx(2.9e-26, rel=0.05)

    with pytest.raises(ArgumentError):
        normal_weight(n, np.array([0.0, 0.0, 1.1]), 15.0)


def test_assign_filtered_normal():
    """Test the nearest clean normal is chosen, lowest index on ties."""
    patch = make_patch([[0, 0, 0], [1, 0, 0], [1, 0, 0]], [[0, 0, 1], [1, 0, 0], [0, 1, 0]])
    np.testing.assert_array_equal(assign_filtered_normal([0, 0, 0], patch), [0, 0, 1])
    np.testing.assert_array_equal(assign_filtered_normal([0.9, 0, 0], patch), [1, 0, 0])

    single = make_patch([[0.3, 0.3, 0.3]], [[0, 1, 0]])
    np.testing.assert_array_equal(assign_filtered_normal([-5, 5, 1], single), [0, 1, 0])

    rng = np.random.default_rng(20)
    for _ in range(20):
        patch = random_patch(rng)
        d = rng.uniform(-1, 1, size=3)
        j = int(np.argmin([np.sum((d - p) ** 2) for p in patch.clean_points]))
        np.testing.assert_array_equal(assign_filtered_normal(d, patch), patch.clean_normals[j])


def test_single_point_projection():
    """Test single-point patches reduce to the plain plane distance."""
    patch = make_patch([[0, 0, 0]], [[0, 0, 1]])
    d = np.array([0.0, 0.0, 0.5])
    assert loss_proj_a(d, patch).projection == pytest.approx(0.5)
    assert loss_proj_b(d, patch).projection == pytest.approx(0.5)
    assert loss_proj_a(np.zeros(3), patch).projection == 0.0

    lone = make_patch([[0.2, -0.1, 0.4]], [[0.6, 0.0, 0.8]])
    d = np.array([0.5, 0.3, -0.2])
    expected = abs(float((d - lone.clean_points[0]) @ lone.clean_normals[0]))
    assert loss_proj_b(d, lone).projection == pytest.approx(expected, rel=1e-12)


def test_losses_match_oracles():
    """Test every loss against direct summation on 200 random 16-point patches."""
    rng = np.random.default_rng(21)
    params = LossParams(eta=0.97, sigma_n=15.0)
    for _ in range(200):
        patch = random_patch(rng)
        d = rng.uniform(-0.5, 0.5, size=3)

        assert sigma_p(patch) == pytest.approx(oracle_sigma_p(patch), rel=1e-12)
        assert loss_proj_a(d, patch).projection == pytest.approx(oracle_projection(d, patch), rel=1e-12)
        assert loss_proj_b(d, patch, params).projection == pytest.approx(
            oracle_projection(d, patch, sigma_n=15.0), rel=1e-12
        )
        assert loss_rep(d, patch).repulsion == pytest.approx(oracle_rep(d, patch), rel=1e-12)
        assert loss_l2(d, patch).projection == pytest.approx(oracle_l2(d, patch), rel=1e-12)


def test_bilateral_weight_boost():
    """Test an aligned neighbor dominates an orthogonal one by the theta ratio."""
    params = LossParams(sigma_n=15.0)
    # Filtered point nearest to the first clean point, so its normal is assigned.
    patch = make_patch([[0, 0, 0], [0.01, 0, 0]], [[0, 0, 1], [1, 0, 0]], m=1)
    d = np.array([0.0, 0.0, 0.3])

    a_aligned = abs(0.3)
    a_orthogonal = abs(-0.01)
    boost = math.exp(1 / (1 - math.cos(math.radians(15.0))))
    sp = sigma_p(patch)
    w_aligned = math.exp(-0.09 / sp**2) * boost
    w_orthogonal = math.exp(-(0.09 + 0.0001) / sp**2)
    expected = (w_aligned * a_aligned + w_orthogonal * a_orthogonal) / (w_aligned + w_orthogonal)
    assert loss_proj_b(d, patch, params).projection == pytest.approx(expected, rel=1e-12)


def test_proj_b_equals_proj_a_for_shared_normals():
    """Test identical normals make the bilateral factor cancel."""
    rng = np.random.default_rng(22)
    points = rng.uniform(-0.5, 0.5, size=(12, 3))
    patch = make_patch(points, np.tile([0.0, 0.6, 0.8], (12, 1)))
    d = rng.uniform(-0.3, 0.3, size=3)
    assert loss_proj_b(d, patch).projection == pytest.approx(loss_proj_a(d, patch).projection, rel=1e-12)


def test_projection_bounded_by_distance():
    """Test projections are non-negative and below the farthest distance."""
    rng = np.random.default_rng(23)
    for _ in range(50):
        patch = random_patch(rng)
        d = rng.uniform(-1, 1, size=3)
        bound = oracle_rep(d, patch)
        for terms in (loss_proj_a(d, patch), loss_proj_b(d, patch)):
            assert 0.0 <= terms.projection <= bound + 1e-12


def test_gradients_match_finite_differences():
    """Test every loss gradient against central differences at generic points."""
    rng = np.random.default_rng(24)
    params = LossParams()
    checked = 0
    while checked < 20:
        patch = random_patch(rng)
        d = rng.uniform(-0.4, 0.4, size=3)
        distances = np.sort(np.linalg.norm(patch.clean_points - d, axis=1))
        projections = np.abs(np.einsum("ij,ij->i", d - patch.clean_points, patch.clean_normals))
        # Stay away from nearest-point switches, max ties and |.| kinks.
        if distances[1] - distances[0] < 1e-3 or distances[-1] - distances[-2] < 1e-3 or projections.min() < 1e-3:
            continue
        checked += 1

        for loss in (
            lambda x: loss_proj_a(x, patch),
            lambda x: loss_proj_b(x, patch, params),
            lambda x: loss_rep(x, patch),
            lambda x: loss_l2(x, patch),
            lambda x: total_loss(x, patch, params, "proj_b"),
            lambda x: total_loss(x, patch, params, "l2"),
        ):
            analytic = loss(d).grad_wrt_displacement
            numeric = central_difference(lambda x: loss(x).total, d)
            error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8)
            assert error < 1e-6


def test_loss_rep_values():
    """Test repulsion on simple configurations."""
    patch = make_patch([[0.3, 0, 0]], [[0, 0, 1]])
    assert loss_rep(np.zeros(3), patch).repulsion == pytest.approx(0.3)

    rng = np.random.default_rng(25)
    sphere = rng.normal(size=(30, 3))
    sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
    assert loss_rep(np.zeros(3), make_patch(sphere, sphere)).repulsion == pytest.approx(1.0)


def test_total_loss_mixing():
    """Test the eta mixing identity and its extremes."""
    rng = np.random.default_rng(26)
    patch = random_patch(rng)
    d = rng.uniform(-0.3, 0.3, size=3)

    for kind in ("l2", "proj_a", "proj_b"):
        terms = total_loss(d, patch, LossParams(eta=0.97), kind)
        assert terms.total == pytest.approx(0.97 * terms.projection + 0.03 * terms.repulsion, abs=1e-12)
        assert total_loss(d, patch, LossParams(eta=1.0), kind).total == terms.projection
        assert total_loss(d, patch, LossParams(eta=0.0), kind).total == terms.repulsion

    with pytest.raises(ArgumentError):
        total_loss(d, patch, LossParams(), "chamfer")


def test_losses_are_rotation_invariant():
    """Test a common rotation of displacement, points and normals leaves losses unchanged."""
    rng = np.random.default_rng(27)
    for trial in range(20):
        patch = random_patch(rng)
        d = rng.uniform(-0.4, 0.4, size=3)
        q = Rotation.random(random_state=trial).as_matrix()
        rotated = make_patch(patch.clean_points @ q.T, patch.clean_normals @ q.T)
        for kind in ("l2", "proj_a", "proj_b"):
            a = total_loss(d, patch, LossParams(), kind)
            b = total_loss(q @ d, rotated, LossParams(), kind)
            assert b.total == pytest.approx(a.total, abs=1e-9)


def test_loss_params_validation():
    """Test eta and sigma_n ranges."""
    with pytest.raises(ArgumentError):
        LossParams(eta=1.5)
    with pytest.raises(ArgumentError):
        LossParams(sigma_n=90.0)
    with pytest.raises(ArgumentError):
        LossParams(sigma_n=0.0)


if __name__ == "__main__":
    test_sigma_p_values()
    test_spatial_weight()
    test_normal_weight()
    test_assign_filtered_normal()
    test_single_point_projection()
    test_losses_match_oracles()
    test_bilateral_weight_boost()
    test_proj_b_equals_proj_a_for_shared_normals()
    test_projection_bounded_by_distance()
    test_gradients_match_finite_differences()
    test_loss_rep_values()
    test_total_loss_mixing()
    test_losses_are_rotation_invariant()
    test_loss_params_validation()
    print("All tests passed!")
