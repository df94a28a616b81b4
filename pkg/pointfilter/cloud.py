"""Point cloud and triangle mesh types, text I/O and spatial queries."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from pointfilter.errors import (
    ArgumentError,
    EmptyInputError,
    FileError,
    ParseError,
    WriteError,
)

UNIT_TOLERANCE = 1e-6

# Slack applied to the tree's own `<=` test before the exact strict filter.
_RADIUS_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions plus optional unit normals, both `(n, 3)` float64 arrays."""

    positions: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(positions)):
            raise ArgumentError("point cloud positions must be finite")
        object.__setattr__(self, "positions", positions)

        if self.normals is not None:
            normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(positions):
                raise ArgumentError(
                    f"{len(normals)} normals for {len(positions)} positions"
                )
            if not np.all(np.isfinite(normals)):
                raise ArgumentError("point cloud normals must be finite")
            lengths = np.linalg.norm(normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > UNIT_TOLERANCE):
                raise ArgumentError("point cloud normals must have unit length")
            object.__setattr__(self, "normals", normals)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Vertex array `(v, 3)` and triangle index array `(t, 3)`."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise ArgumentError("mesh vertices must be finite")
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ArgumentError("mesh triangle index out of range")
        a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
        if np.any((a == b) | (b == c) | (a == c)):
            raise ArgumentError("mesh triangle repeats a vertex")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return the three `(t, 3)` corner arrays of all triangles."""
        return (
            self.vertices[self.triangles[:, 0]],
            self.vertices[self.triangles[:, 1]],
            self.vertices[self.triangles[:, 2]],
        )


def _read_lines(path: Path) -> list[str]:
    try:
        return Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise FileError(f"no such file: {path}")
    except OSError as e:
        raise FileError(f"cannot read {path}: {e}")


def load_cloud(path: Path | str) -> PointCloud:
    """
    Load a whitespace-separated text cloud.

    Every record has 3 columns (x y z) or 6 columns (x y z nx ny nz); the
    first record decides which, and all records must agree. Lines starting
    with '#' and blank lines are ignored. Normals are re-normalized.

    Raises:
        ParseError: On a non-numeric token or a wrong column count.
        EmptyInputError: If the file holds no records.
    """
    path = Path(path)
    rows: list[list[float]] = []
    columns: int | None = None

    for line_number, line in enumerate(_read_lines(path), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) not in (3, 6):
            raise ParseError(
                f"expected 3 or 6 columns, got {len(tokens)}", path, line_number
            )
        if columns is None:
            columns = len(tokens)
        elif len(tokens) != columns:
            raise ParseError(
                f"expected {columns} columns like the first record, got {len(tokens)}",
                path,
                line_number,
            )
        try:
            values = [float(token) for token in tokens]
        except ValueError:
            raise ParseError(f"non-numeric token in {stripped!r}", path, line_number)
        if not all(np.isfinite(values)):
            raise ParseError("non-finite value", path, line_number)
        if columns == 6:
            length = float(np.linalg.norm(values[3:]))
            if length == 0.0:
                raise ParseError("zero-length normal", path, line_number)
        rows.append(values)

    if not rows:
        raise EmptyInputError(f"{path} contains no points")

    data = np.array(rows, dtype=np.float64)
    if columns == 6:
        normals = data[:, 3:6] / np.linalg.norm(data[:, 3:6], axis=1, keepdims=True)
        return PointCloud(data[:, :3], normals)
    return PointCloud(data)


def save_cloud(cloud: PointCloud, path: Path | str) -> None:
    """Write a cloud in the text format read by `load_cloud`."""
    data = cloud.positions
    if cloud.normals is not None:
        data = np.hstack([cloud.positions, cloud.normals])
    try:
        np.savetxt(path, data, fmt="%.17g")
    except OSError as e:
        raise WriteError(f"cannot write {path}: {e}")


def load_mesh(path: Path | str) -> TriangleMesh:
    """
    Load an ASCII OFF triangle mesh.

    Polygons with more than three corners are fanned into triangles.
    """
    path = Path(path)
    records: list[tuple[int, list[str]]] = []
    for line_number, line in enumerate(_read_lines(path), start=1):
        content = line.split("#", 1)[0].strip()
        if content:
            records.append((line_number, content.split()))

    if not records:
        raise EmptyInputError(f"{path} is empty")

    line_number, tokens = records[0]
    if tokens[0] != "OFF":
        raise ParseError("missing OFF header", path, line_number)
    tokens = tokens[1:]
    cursor = 1
    if not tokens:
        if len(records) < 2:
            raise ParseError("missing element counts", path, line_number)
        line_number, tokens = records[1]
        cursor = 2

    try:
        vertex_count, face_count = int(tokens[0]), int(tokens[1])
    except (ValueError, IndexError):
        raise ParseError("bad element counts", path, line_number)

    if len(records) < cursor + vertex_count + face_count:
        raise ParseError("file ends before all elements were read", path)

    vertices = np.empty((vertex_count, 3))
    for k in range(vertex_count):
        line_number, tokens = records[cursor + k]
        if len(tokens) < 3:
            raise ParseError("vertex needs 3 coordinates", path, line_number)
        try:
            vertices[k] = [float(t) for t in tokens[:3]]
        except ValueError:
            raise ParseError("non-numeric vertex coordinate", path, line_number)
    cursor += vertex_count

    triangles: list[tuple[int, int, int]] = []
    for k in range(face_count):
        line_number, tokens = records[cursor + k]
        try:
            count = int(tokens[0])
            corners = [int(t) for t in tokens[1 : 1 + count]]
        except ValueError:
            raise ParseError("non-integer face index", path, line_number)
        if count < 3 or len(corners) != count:
            raise ParseError("face needs at least 3 corner indices", path, line_number)
        for j in range(1, count - 1):
            triangles.append((corners[0], corners[j], corners[j + 1]))

    return TriangleMesh(vertices, np.array(triangles, dtype=np.int64).reshape(-1, 3))


def save_mesh(mesh: TriangleMesh, path: Path | str) -> None:
    """Write a mesh as ASCII OFF."""
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.triangles)} 0"]
    lines.extend(" ".join(f"{v:.17g}" for v in vertex) for vertex in mesh.vertices)
    lines.extend(f"3 {a} {b} {c}" for a, b, c in mesh.triangles)
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise WriteError(f"cannot write {path}: {e}")


def bbox_diagonal(cloud: PointCloud) -> float:
    """Return the length of the axis-aligned bounding box diagonal."""
    if len(cloud) == 0:
        raise EmptyInputError("bounding box of an empty cloud")
    extent = cloud.positions.max(axis=0) - cloud.positions.min(axis=0)
    return float(np.linalg.norm(extent))


def squared_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances from each row of `points` to `query`."""
    diff = points - query
    return np.einsum("ij,ij->i", diff, diff)


@dataclass(frozen=True, eq=False)
class NeighborIndex:
    """
    Read-only KD-tree over one cloud's positions.

    Queries are answered by the tree, then re-checked with `squared_distances`
    so results agree exactly with a brute-force scan using the same formula.
    """

    points: np.ndarray
    tree: cKDTree = field(repr=False)

    def __len__(self) -> int:
        return len(self.points)


def build_index(cloud: PointCloud) -> NeighborIndex:
    """Build a NeighborIndex over a non-empty cloud."""
    if len(cloud) == 0:
        raise EmptyInputError("cannot index an empty cloud")
    points = cloud.positions.copy()
    points.setflags(write=False)
    return NeighborIndex(points, cKDTree(points))


def radius_neighbors(index: NeighborIndex, center: np.ndarray, r: float) -> np.ndarray:
    """
    Return the indices of points strictly closer than `r` to `center`.

    Indices are sorted ascending. A zero radius matches nothing.
    """
    if not (r >= 0 and np.isfinite(r)):
        raise ArgumentError(f"radius must be non-negative, got {r}")
    if r == 0:
        return np.empty(0, dtype=np.int64)
    center = np.asarray(center, dtype=np.float64)
    candidates = np.asarray(
        index.tree.query_ball_point(center, r * (1.0 + _RADIUS_SLACK) + _RADIUS_SLACK),
        dtype=np.int64,
    )
    if len(candidates) == 0:
        return candidates
    inside = squared_distances(index.points[candidates], center) < r * r
    return np.sort(candidates[inside])


def k_nearest(index: NeighborIndex, query: np.ndarray, k: int) -> np.ndarray:
    """
    Return the `k` indices closest to `query`, sorted by distance then index.
    """
    if not 1 <= k <= len(index):
        raise ArgumentError(f"k must be in [1, {len(index)}], got {k}")
    query = np.asarray(query, dtype=np.float64)
    distances, _ = index.tree.query(query, k=k)
    kth = float(np.atleast_1d(distances)[-1])

    # Gather every point tied with (or inside) the k-th distance, then order exactly.
    candidates = np.asarray(
        index.tree.query_ball_point(query, kth * (1.0 + _RADIUS_SLACK) + _RADIUS_SLACK),
        dtype=np.int64,
    )
    d2 = squared_distances(index.points[candidates], query)
    order = np.lexsort((candidates, d2))
    return candidates[order[:k]]


def nearest_many(index: NeighborIndex, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Batched k-nearest lookup for metric evaluation.

    Returns:
        Tuple of (indices, squared distances), both `(q, k)`; the squared
        distances are recomputed exactly from the returned indices. Ties are
        left in the tree's order, unlike `k_nearest`.
    """
    if not 1 <= k <= len(index):
        raise ArgumentError(f"k must be in [1, {len(index)}], got {k}")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    _, indices = index.tree.query(queries, k=k)
    indices = np.asarray(indices, dtype=np.int64).reshape(len(queries), k)
    diff = index.points[indices] - queries[:, None, :]
    return indices, np.einsum("qkj,qkj->qk", diff, diff)


def closest_points_on_triangles(
    p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> np.ndarray:
    """
    Closest point on each triangle `(a[i], b[i], c[i])` to the point(s) `p`.

    Voronoi-region walk over vertices, edges and face, vectorized across
    triangles. `p` broadcasts against the `(t, 3)` corner arrays.
    """
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c

    def dot(u, v):
        return np.einsum("...j,...j->...", u, v)

    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
    v_face, w_face = vb * denom, vc * denom

    regions = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    candidates = [
        a,
        b,
        a + v_ab[..., None] * ab,
        c,
        a + w_ac[..., None] * ac,
        b + w_bc[..., None] * (c - b),
    ]
    result = a + ab * v_face[..., None] + ac * w_face[..., None]
    # Later assignments must not override earlier regions, so walk backwards.
    for region, candidate in zip(reversed(regions), reversed(candidates)):
        result = np.where(region[..., None], candidate, result)
    return result


def triangle_areas(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)


def point_triangle_distance(p: np.ndarray, tri: np.ndarray) -> float:
    """
    Exact distance from `p` to the closed triangle `tri` (three corner rows).

    Raises:
        ArgumentError: If the triangle has zero area.
    """
    tri = np.asarray(tri, dtype=np.float64).reshape(3, 3)
    a, b, c = tri[None, 0], tri[None, 1], tri[None, 2]
    if not triangle_areas(a, b, c)[0] > 0.0:
        raise ArgumentError("degenerate triangle")
    p = np.asarray(p, dtype=np.float64)
    closest = closest_points_on_triangles(p, a, b, c)[0]
    return float(np.linalg.norm(closest - p))
