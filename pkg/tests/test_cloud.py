"""Tests for cloud and mesh types, text I/O and spatial queries."""

from itertools import permutations
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from pointfilter.cloud import (
    PointCloud,
    TriangleMesh,
    bbox_diagonal,
    build_index,
    k_nearest,
    load_cloud,
    load_mesh,
    point_triangle_distance,
    radius_neighbors,
    save_cloud,
    save_mesh,
)
from pointfilter.errors import (
    ArgumentError,
    EmptyInputError,
    FileError,
    ParseError,
    WriteError,
)


def test_load_cloud_positions_only():
    """Test a two-record file without normals."""
    with TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "two.xyz"
        path.write_text("0 0 0\n1 0 0\n")

        cloud = load_cloud(path)
        assert len(cloud) == 2
        assert not cloud.has_normals
        np.testing.assert_array_equal(cloud.positions[1], [1, 0, 0])


def test_load_cloud_with_normal():
    """Test a six-column record yields a normal."""
    with TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "one.xyz"
        path.write_text("# comment\n\n0 0 0 0 0 1\n")

        cloud = load_cloud(path)
        assert len(cloud) == 1
        np.testing.assert_array_equal(cloud.normals[0], [0, 0, 1])


def test_load_cloud_renormalizes_normals():
    """Test normals are rescaled to unit length on load."""
    with TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "n.xyz"
        path.write_text("1 2 3 0 0 4\n")

        cloud = load_cloud(path)
        np.testing.assert_allclose(cloud.normals[0], [0, 0, 1])


def test_load_cloud_parse_errors():
    """Test malformed files report the offending line."""
    with TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "bad.xyz"
        path.write_text("0 0 x\n")
        with pytest.raises(ParseError) as excinfo:
            load_cloud(path)
        assert excinfo.value.line == 1
        assert "bad.xyz:1:" in str(excinfo.value)

        path.write_text("0 0 0\n1 1 1 0 0 1\n")
        with pytest.raises(ParseError) as excinfo:
            load_cloud(path)
        assert excinfo.value.line == 2

        path.write_text("0 0 0 0 0 0\n")
        with pytest.raises(ParseError):
            load_cloud(path)


def test_load_cloud_empty_and_missing():
    """Test empty and missing files."""
    with TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "empty.xyz"
        path.write_text("# nothing here\n")
        with pytest.raises(EmptyInputError):
            load_cloud(path)
        with pytest.raises(FileError):
            load_cloud(Path(tmpdir) / "missing.xyz")


def test_save_cloud_round_trip():
    """Test saving and loading preserves coordinates exactly."""
    rng = np.random.default_rng(1)
    positions = rng.normal(size=(100, 3))
    normals = rng.normal(size=(100, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    with TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "cloud.xyz"
        save_cloud(PointCloud(positions, normals), path)

        assert all(len(line.split()) == 6 for line in path.read_text().splitlines())
        loaded = load_cloud(path)
        assert np.max(np.abs(loaded.positions - positions)) < 1e-6
        np.testing.assert_allclose(loaded.normals, normals, atol=1e-12)


def test_save_cloud_unwritable():
    """Test writing into a missing directory fails with a write error."""
    with TemporaryDirectory() as tmpdir:
        with pytest.raises(WriteError):
            save_cloud(PointCloud(np.zeros((1, 3))), Path(tmpdir) / "no" / "such" / "dir.xyz")


def test_point_cloud_validation():
    """Test non-finite positions and non-unit normals are rejected."""
    with pytest.raises(ArgumentError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(ArgumentError):
        PointCloud(np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]))
    with pytest.raises(ArgumentError):
        PointCloud(np.zeros((2, 3)), np.array([[0.0, 0.0, 1.0]]))


def test_bbox_diagonal():
    """Test bounding box diagonals of simple point sets."""
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    assert bbox_diagonal(PointCloud(corners)) == pytest.approx(np.sqrt(3))
    assert bbox_diagonal(PointCloud(np.array([[2.0, 3.0, 4.0]]))) == 0.0
    assert bbox_diagonal(PointCloud(np.array([[0.0, 0, 0], [3.0, 4, 0]]))) == 5.0
    with pytest.raises(EmptyInputError):
        bbox_diagonal(PointCloud(np.empty((0, 3))))


def test_radius_neighbors_matches_brute_force():
    """Test radius queries against a linear scan."""
    rng = np.random.default_rng(2)
    points = rng.uniform(-1, 1, size=(1000, 3))
    index = build_index(PointCloud(points))

    for _ in range(50):
        center = rng.uniform(-1, 1, size=3)
        r = rng.uniform(0.05, 0.6)
        expected = np.flatnonzero(np.sum((points - center) ** 2, axis=1) < r * r)
        np.testing.assert_array_equal(radius_neighbors(index, center, r), expected)


def test_radius_neighbors_edge_cases():
    """Test zero, tiny, huge and negative radii."""
    points = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 2, 0]])
    index = build_index(PointCloud(points))

    assert len(radius_neighbors(index, points[0], 0.0)) == 0
    assert 1 in radius_neighbors(index, points[1], 1e-9)
    np.testing.assert_array_equal(radius_neighbors(index, points[0], 10.0), [0, 1, 2])
    # Strictly less than r: the point at distance exactly 1 is excluded.
    np.testing.assert_array_equal(radius_neighbors(index, points[0], 1.0), [0])
    with pytest.raises(ArgumentError):
        radius_neighbors(index, points[0], -1.0)


def test_k_nearest_matches_brute_force():
    """Test k-nearest queries against a stable sort of all distances."""
    rng = np.random.default_rng(3)
    points = rng.uniform(-1, 1, size=(500, 3))
    index = build_index(PointCloud(points))

    for _ in range(20):
        query = rng.uniform(-1, 1, size=3)
        d2 = np.sum((points - query) ** 2, axis=1)
        expected = np.lexsort((np.arange(len(points)), d2))[:10]
        np.testing.assert_array_equal(k_nearest(index, query, 10), expected)

    assert k_nearest(index, points[17], 1)[0] == 17
    everything = k_nearest(index, points[0], len(points))
    assert sorted(everything) == list(range(len(points)))
    with pytest.raises(ArgumentError):
        k_nearest(index, points[0], len(points) + 1)


def test_k_nearest_ties_break_by_index():
    """Test equidistant points come back in index order."""
    points = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0.0, 1, 0], [0.0, -1, 0]])
    index = build_index(PointCloud(points))
    np.testing.assert_array_equal(k_nearest(index, np.zeros(3), 3), [0, 1, 2])


def test_point_triangle_distance_analytic():
    """Test distances for points above, at and beside a triangle."""
    tri = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    centroid = tri.mean(axis=0)

    assert point_triangle_distance(centroid + [0, 0, 0.7], tri) == pytest.approx(0.7)
    assert point_triangle_distance(tri[1], tri) == 0.0
    assert point_triangle_distance([2.0, 0, 0], tri) == pytest.approx(1.0)
    assert point_triangle_distance([-1.0, -1, 0], tri) == pytest.approx(np.sqrt(2))
    assert point_triangle_distance([1.0, 1, 0], tri) == pytest.approx(np.sqrt(2) / 2)
    with pytest.raises(ArgumentError):
        point_triangle_distance([0, 0, 1], np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]))


def sampled_distance(p: np.ndarray, tri: np.ndarray, rng: np.random.Generator) -> float:
    """Distance to the nearest of many barycentric samples, refined around the best one."""
    u, v = rng.uniform(size=(2, 100_000))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    best_u, best_v, best = 0.0, 0.0, np.inf
    for window in (None, 0.05, 0.0125, 3e-3, 8e-4, 2e-4, 5e-5, 1.2e-5):
        if window is not None:
            u = np.clip(best_u + rng.uniform(-window, window, size=20_000), 0.0, 1.0)
            v = np.clip(best_v + rng.uniform(-window, window, size=20_000), 0.0, 1.0)
            over = u + v > 1
            total = u[over] + v[over]
            u[over], v[over] = u[over] / total, v[over] / total
        samples = tri[0] + u[:, None] * (tri[1] - tri[0]) + v[:, None] * (tri[2] - tri[0])
        d = np.sqrt(np.sum((samples - p) ** 2, axis=1))
        k = int(np.argmin(d))
        if d[k] < best:
            best_u, best_v, best = u[k], v[k], float(d[k])
    return best


def test_point_triangle_distance_matches_dense_sampling():
    """Test random configurations against refined sampling of the triangle surface."""
    rng = np.random.default_rng(4)
    for _ in range(10):
        tri = rng.normal(size=(3, 3))
        p = rng.normal(size=3) * 1.5
        dense = sampled_distance(p, tri, rng)

        exact = point_triangle_distance(p, tri)
        assert exact <= dense + 1e-12
        assert dense - exact < 1e-4


def test_point_triangle_distance_invariances():
    """Test vertex order and a common rigid motion leave the distance unchanged."""
    rng = np.random.default_rng(5)
    for trial in range(20):
        tri = rng.normal(size=(3, 3))
        p = rng.normal(size=3) * 1.5
        expected = point_triangle_distance(p, tri)

        for order in permutations(range(3)):
            assert point_triangle_distance(p, tri[list(order)]) == pytest.approx(expected, abs=1e-9)

        q = Rotation.random(random_state=trial).as_matrix()
        t = rng.normal(size=3) * 10
        assert point_triangle_distance(q @ p + t, tri @ q.T + t) == pytest.approx(expected, abs=1e-9)


def test_bbox_diagonal_invariances():
    """Test translating or reordering a cloud keeps its diagonal."""
    rng = np.random.default_rng(6)
    points = rng.normal(size=(200, 3)) * [3.0, 1.0, 0.2]
    expected = bbox_diagonal(PointCloud(points))

    assert bbox_diagonal(PointCloud(points[rng.permutation(200)])) == expected
    for _ in range(5):
        t = rng.normal(size=3) * 100
        assert bbox_diagonal(PointCloud(points + t)) == pytest.approx(expected, rel=1e-12)


def test_mesh_round_trip():
    """Test OFF save/load, including quads fanned into triangles."""
    with TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "quad.off"
        path.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
        mesh = load_mesh(path)
        np.testing.assert_array_equal(mesh.triangles, [[0, 1, 2], [0, 2, 3]])

        out = Path(tmpdir) / "out.off"
        save_mesh(mesh, out)
        again = load_mesh(out)
        np.testing.assert_array_equal(again.vertices, mesh.vertices)
        np.testing.assert_array_equal(again.triangles, mesh.triangles)


def test_mesh_errors():
    """Test malformed OFF files and invalid triangles."""
    with TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "bad.off"
        path.write_text("PLY\n")
        with pytest.raises(ParseError):
            load_mesh(path)

        path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n")
        with pytest.raises(ParseError):
            load_mesh(path)

    with pytest.raises(ArgumentError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(ArgumentError):
        TriangleMesh(np.eye(3), [[0, 1, 1]])


if __name__ == "__main__":
    test_load_cloud_positions_only()
    test_load_cloud_with_normal()
    test_load_cloud_renormalizes_normals()
    test_load_cloud_parse_errors()
    test_load_cloud_empty_and_missing()
    test_save_cloud_round_trip()
    test_save_cloud_unwritable()
    test_point_cloud_validation()
    test_bbox_diagonal()
    test_radius_neighbors_matches_brute_force()
    test_radius_neighbors_edge_cases()
    test_k_nearest_matches_brute_force()
    test_k_nearest_ties_break_by_index()
    test_point_triangle_distance_analytic()
    test_point_triangle_distance_matches_dense_sampling()
    test_point_triangle_distance_invariances()
    test_bbox_diagonal_invariances()
    test_mesh_round_trip()
    test_mesh_errors()
    print("All tests passed!")
