"""Tests for point-wise and whole-cloud filtering."""

import os
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from pointfilter.cloud import PointCloud, bbox_diagonal, build_index
from pointfilter.dataset import NoiseSpec, add_noise, build_manifest
from pointfilter.errors import ArgumentError, EmptyInputError
from pointfilter.inference import FilterConfig, filter_cloud, filter_point
from pointfilter.metrics import chamfer, mse_metric
from pointfilter.network import Architecture, NetworkParams, init_params
from pointfilter.shapes import ShapeSpec, sample_shape
from pointfilter.training import TrainConfig, train

TINY = Architecture((8, 16), (8, 3))

slow = pytest.mark.skipif(os.environ.get("POINTFILTER_SLOW") != "1", reason="set POINTFILTER_SLOW=1 to run")


def trained_like(seed: int = 0) -> NetworkParams:
    """Random parameters with non-trivial batch-norm statistics."""
    rng = np.random.default_rng(seed)
    params = init_params(TINY, seed=seed)
    for name, value in params.tensors.items():
        if name.endswith(".bn.running_mean"):
            value[:] = rng.normal(scale=0.1, size=value.shape)
        elif name.endswith(".bn.running_var"):
            value[:] = rng.uniform(0.5, 2.0, size=value.shape)
    return params


def noisy_sphere(count: int = 500, seed: int = 0) -> PointCloud:
    clean, _ = sample_shape(ShapeSpec("sphere", point_count=count, seed=seed))
    return add_noise(clean, NoiseSpec("gaussian", 0.01, seed=seed))


def test_zero_head_is_identity():
    """Test a network that outputs zero leaves every point in place."""
    cloud = noisy_sphere(300)
    params = init_params(TINY, seed=1).with_zero_head()
    result = filter_cloud(params, cloud, FilterConfig(iterations=3, patch_size=16, seed=0))

    np.testing.assert_array_equal(result.cloud.positions, cloud.positions)
    assert result.summary.iterations == 3
    assert result.summary.points == 300


def test_point_count_and_movement_bound():
    """Test the output keeps the point count and moves points at most sqrt(3) r."""
    cloud = noisy_sphere(400, seed=1)
    config = FilterConfig(iterations=1, patch_size=32, radius_fraction=0.08, seed=2)
    result = filter_cloud(trained_like(1), cloud, config)

    assert len(result.cloud) == len(cloud)
    assert not result.cloud.has_normals
    r = config.radius_fraction * bbox_diagonal(cloud)
    moved = np.linalg.norm(result.cloud.positions - cloud.positions, axis=1)
    assert np.all(moved <= np.sqrt(3) * r * (1 + 1e-9))
    assert np.any(moved > 0)


def test_filter_point_is_rigid_equivariant():
    """Test filtering a rigidly moved cloud moves the filtered point the same way."""
    rng = np.random.default_rng(2)
    params = trained_like(2)
    config = FilterConfig(patch_size=256)
    for trial in range(10):
        points = rng.normal(size=(150, 3)) * [1.0, 0.5, 0.1]
        points += 0.3 * points**2 * [1.0, 1.0, 0.0]
        q = Rotation.random(random_state=trial).as_matrix()
        t = rng.normal(size=3)
        moved_points = points @ q.T + t

        cloud, moved = PointCloud(points), PointCloud(moved_points)
        i = int(rng.integers(150))
        a = filter_point(params, cloud, build_index(cloud), i, config, radius=50.0)
        b = filter_point(params, moved, build_index(moved), i, config, radius=50.0)
        np.testing.assert_allclose(b, q @ a + t, atol=1e-5)


def test_filter_point_matches_filter_cloud():
    """Test single-point filtering agrees with one batched pass, downsampling included."""
    cloud = noisy_sphere(200, seed=3)
    params = trained_like(3)
    for patch_size in (200, 8):
        config = FilterConfig(iterations=1, patch_size=patch_size, radius_fraction=0.1, precision="float64", seed=0)
        result = filter_cloud(params, cloud, config)

        index = build_index(cloud)
        for i in (0, 17, 199):
            expected = result.cloud.positions[i]
            np.testing.assert_allclose(filter_point(params, cloud, index, i, config), expected, atol=1e-9)


def test_filter_cloud_is_permutation_equivariant():
    """Test shuffling the input shuffles the output the same way."""
    cloud = noisy_sphere(300, seed=4)
    params = trained_like(4)
    order = np.random.default_rng(5).permutation(300)
    for patch_size in (300, 8):
        config = FilterConfig(iterations=2, patch_size=patch_size, radius_fraction=0.1, precision="float64", seed=0)

        a = filter_cloud(params, cloud, config).cloud.positions
        b = filter_cloud(params, PointCloud(cloud.positions[order]), config).cloud.positions
        np.testing.assert_allclose(b, a[order], atol=1e-8)


def test_downsampling_ignores_chunking():
    """Test a point's sampled patch does not depend on how points are chunked."""
    cloud = noisy_sphere(300, seed=7)
    params = trained_like(7)
    runs = [
        filter_cloud(params, cloud, FilterConfig(iterations=1, patch_size=8, chunk_size=size, precision="float64", seed=3))
        for size in (1, 7, 300)
    ]
    for run in runs[1:]:
        np.testing.assert_allclose(run.cloud.positions, runs[0].cloud.positions, atol=1e-9)


def test_filter_cloud_is_independent_of_threads():
    """Test seeded runs are bitwise identical for any thread count."""
    cloud = noisy_sphere(500, seed=5)
    params = trained_like(5)
    runs = [
        filter_cloud(params, cloud, FilterConfig(iterations=2, patch_size=8, chunk_size=32, threads=threads, deterministic=True))
        for threads in (1, 4, 4)
    ]
    for run in runs[1:]:
        np.testing.assert_array_equal(run.cloud.positions, runs[0].cloud.positions)


def test_isolated_points_are_unchanged():
    """Test a point with no neighbors within r is copied through and counted."""
    rng = np.random.default_rng(6)
    positions = np.vstack([rng.uniform(0, 1, size=(60, 3)), [[10.0, 0.0, 0.0]]])
    cloud = PointCloud(positions)
    config = FilterConfig(iterations=2, patch_size=16, radius_fraction=0.2, seed=0)
    result = filter_cloud(trained_like(6), cloud, config)

    np.testing.assert_array_equal(result.cloud.positions[-1], [10.0, 0.0, 0.0])
    assert result.summary.isolated == 2

    single = PointCloud(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(filter_cloud(trained_like(6), single, config).cloud.positions, single.positions)


def test_filter_errors():
    """Test empty clouds, bad indices and invalid settings."""
    params = trained_like(7)
    with pytest.raises(EmptyInputError):
        filter_cloud(params, PointCloud(np.empty((0, 3))))
    cloud = noisy_sphere(50)
    with pytest.raises(ArgumentError):
        filter_point(params, cloud, build_index(cloud), 50)
    with pytest.raises(ArgumentError):
        FilterConfig(iterations=0)
    with pytest.raises(ArgumentError):
        FilterConfig(threads=0)
    with pytest.raises(ArgumentError):
        FilterConfig(precision="half")


def test_on_iteration_callback():
    """Test the callback sees each iteration with running totals."""
    seen = []
    filter_cloud(
        init_params(TINY, seed=0), noisy_sphere(100), FilterConfig(iterations=3, patch_size=16, seed=0),
        on_iteration=lambda i, summary: seen.append((i, summary.iterations)),
    )
    assert seen == [(0, 1), (1, 2), (2, 3)]


@slow
def test_desk_scale_denoising():
    """Test a small trained model halves the Chamfer distance of a held-out noisy cube."""
    with TemporaryDirectory() as tmpdir:
        shapes = [ShapeSpec(kind, point_count=8000, seed=i) for i, kind in enumerate(("cube", "sphere", "wedge"))]
        manifest = build_manifest(shapes, [0.005, 0.01], Path(tmpdir), patches_per_model=1000, patch_size=128, seed=0)
        config = TrainConfig(epochs=5, batch_size=32, patch_size=128, loss_kind="proj_b", deterministic=True)
        params = train(manifest, config).params

    clean, _ = sample_shape(ShapeSpec("cube", point_count=8000, seed=100))
    noisy = add_noise(clean, NoiseSpec("gaussian", 0.01, seed=101))
    filtered = filter_cloud(params, noisy, FilterConfig(patch_size=128, deterministic=True)).cloud

    assert chamfer(clean, filtered) <= 0.5 * chamfer(clean, noisy)
    assert mse_metric(clean, filtered)[0] < mse_metric(clean, noisy)[0]

    again = filter_cloud(params, noisy, FilterConfig(patch_size=128, deterministic=True, threads=4)).cloud
    np.testing.assert_array_equal(again.positions, filtered.positions)


if __name__ == "__main__":
    test_zero_head_is_identity()
    test_point_count_and_movement_bound()
    test_filter_point_is_rigid_equivariant()
    test_filter_point_matches_filter_cloud()
    test_filter_cloud_is_permutation_equivariant()
    test_downsampling_ignores_chunking()
    test_filter_cloud_is_independent_of_threads()
    test_isolated_points_are_unchanged()
    test_filter_errors()
    test_on_iteration_callback()
    print("All tests passed!")
