"""Procedural clean shapes with exact normals and matching triangle meshes."""

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, Delaunay

from pointfilter.cloud import PointCloud, TriangleMesh, triangle_areas
from pointfilter.errors import ArgumentError

DEFAULT_PARAMETERS: dict[str, dict[str, float]] = {
    "plane": {"size": 1.0},
    "cube": {"size": 1.0},
    "sphere": {"radius": 0.5},
    "cylinder": {"radius": 0.3, "height": 1.0},
    "wedge": {"width": 0.6, "depth": 1.0, "angle": 120.0},
    "torus": {"major": 0.4, "minor": 0.15},
}

SHAPE_KINDS = tuple(DEFAULT_PARAMETERS)


@dataclass(frozen=True)
class ShapeSpec:
    """What to sample: a shape kind, its dimensions and a point budget."""

    kind: str
    parameters: dict[str, float] = field(default_factory=dict)
    point_count: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.point_count < 1:
            raise ArgumentError(f"point_count must be at least 1, got {self.point_count}")
        for name, value in self.parameters.items():
            if not value > 0:
                raise ArgumentError(f"shape parameter {name} must be positive, got {value}")

    def resolved_parameters(self) -> dict[str, float]:
        if self.kind not in DEFAULT_PARAMETERS:
            raise ArgumentError(
                f"unknown shape kind {self.kind!r}; expected one of {', '.join(SHAPE_KINDS)}"
            )
        unknown = set(self.parameters) - set(DEFAULT_PARAMETERS[self.kind])
        if unknown:
            raise ArgumentError(f"unknown {self.kind} parameters: {', '.join(sorted(unknown))}")
        return {**DEFAULT_PARAMETERS[self.kind], **self.parameters}


def _drop_slivers(vertices: np.ndarray, triangles: np.ndarray) -> TriangleMesh:
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    scale = float(np.ptp(vertices, axis=0).max()) or 1.0
    keep = triangle_areas(a, b, c) > 1e-14 * scale * scale
    return TriangleMesh(vertices, triangles[keep])


def _hull_mesh(points: np.ndarray) -> TriangleMesh:
    # Every sample of a convex surface lies on the boundary of its own hull.
    hull = ConvexHull(points)
    return _drop_slivers(points, hull.simplices.astype(np.int64))


def _sample_plane(params, count, rng):
    half = params["size"] / 2
    xy = rng.uniform(-half, half, size=(count, 2))
    positions = np.column_stack([xy, np.zeros(count)])
    normals = np.tile([0.0, 0.0, 1.0], (count, 1))
    vertices = np.array([[-half, -half, 0], [half, -half, 0], [half, half, 0], [-half, half, 0]], dtype=float)
    mesh = TriangleMesh(vertices, [[0, 1, 2], [0, 2, 3]])
    return positions, normals, mesh


def _sample_cube(params, count, rng):
    half = params["size"] / 2
    face = rng.integers(0, 6, size=count)
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    positions = rng.uniform(-half, half, size=(count, 3))
    rows = np.arange(count)
    positions[rows, axis] = sign * half
    normals = np.zeros((count, 3))
    normals[rows, axis] = sign

    corners = np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)])
    quads = [
        (4, 6, 7, 5), (0, 1, 3, 2),  # +x, -x
        (2, 3, 7, 6), (0, 4, 5, 1),  # +y, -y
        (1, 5, 7, 3), (0, 2, 6, 4),  # +z, -z
    ]
    triangles = [tri for q in quads for tri in ((q[0], q[1], q[2]), (q[0], q[2], q[3]))]
    return positions, normals, TriangleMesh(corners, triangles)


def _sample_sphere(params, count, rng):
    radius = params["radius"]
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    scaffold = np.vstack([np.eye(3), -np.eye(3), np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]) / np.sqrt(3)])
    mesh = _hull_mesh(radius * np.vstack([directions, scaffold]))
    return radius * directions, directions, mesh


def _sample_cylinder(params, count, rng):
    radius, height = params["radius"], params["height"]
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius * radius
    part = rng.choice(3, size=count, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))

    theta = rng.uniform(0, 2 * np.pi, size=count)
    z = rng.uniform(-height / 2, height / 2, size=count)
    rho = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, size=count)))
    z = np.where(part == 1, height / 2, np.where(part == 2, -height / 2, z))
    positions = np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])

    normals = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(count)])
    normals[part == 1] = [0.0, 0.0, 1.0]
    normals[part == 2] = [0.0, 0.0, -1.0]

    angles = np.linspace(0, 2 * np.pi, 32, endpoint=False)
    rim = np.column_stack([radius * np.cos(angles), radius * np.sin(angles)])
    scaffold = np.vstack([
        np.column_stack([rim, np.full(len(rim), height / 2)]),
        np.column_stack([rim, np.full(len(rim), -height / 2)]),
    ])
    return positions, normals, _hull_mesh(np.vstack([positions, scaffold]))


def _sample_wedge(params, count, rng):
    width, depth = params["width"], params["depth"]
    half_angle = np.radians(params["angle"]) / 2
    if not half_angle < np.pi / 2:
        raise ArgumentError("wedge angle must be below 180 degrees")
    sin_h, cos_h = np.sin(half_angle), np.cos(half_angle)
    # Two roof faces meet along the y axis and slope down to either side.
    slopes = np.array([[sin_h, 0.0, -cos_h], [-sin_h, 0.0, -cos_h]])
    face_normals = np.array([[cos_h, 0.0, sin_h], [-cos_h, 0.0, sin_h]])

    face = rng.integers(0, 2, size=count)
    s = rng.uniform(0, width, size=count)
    y = rng.uniform(-depth / 2, depth / 2, size=count)
    positions = s[:, None] * slopes[face] + y[:, None] * np.array([0.0, 1.0, 0.0])
    normals = face_normals[face]

    front, back = np.array([0.0, -depth / 2, 0.0]), np.array([0.0, depth / 2, 0.0])
    vertices = np.array([
        front, back,
        front + width * slopes[0], back + width * slopes[0],
        front + width * slopes[1], back + width * slopes[1],
    ])
    triangles = [(0, 2, 3), (0, 3, 1), (0, 1, 5), (0, 5, 4)]
    return positions, normals, TriangleMesh(vertices, triangles)


def _torus_points(major: float, minor: float, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    ring = major + minor * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])


def _sample_torus(params, count, rng):
    major, minor = params["major"], params["minor"]
    if not minor < major:
        raise ArgumentError("torus minor radius must be smaller than the major radius")

    # Area element is proportional to (major + minor cos v); rejection-sample v.
    v = np.empty(0)
    while len(v) < count:
        proposal = rng.uniform(0, 2 * np.pi, size=2 * count)
        accept = rng.uniform(0, 1, size=2 * count) < (major + minor * np.cos(proposal)) / (major + minor)
        v = np.concatenate([v, proposal[accept]])
    v = v[:count]
    u = rng.uniform(0, 2 * np.pi, size=count)

    positions = _torus_points(major, minor, u, v)
    normals = np.column_stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)])

    # Triangulate in the (u, v) domain so every sample is a mesh vertex.
    grid = np.linspace(0, 2 * np.pi, 33)
    gu, gv = np.meshgrid(grid[::2], grid[::2])
    border = np.concatenate([
        np.column_stack([grid, np.zeros_like(grid)]),
        np.column_stack([grid, np.full_like(grid, 2 * np.pi)]),
        np.column_stack([np.zeros_like(grid[1:-1]), grid[1:-1]]),
        np.column_stack([np.full_like(grid[1:-1], 2 * np.pi), grid[1:-1]]),
    ])
    uv = np.vstack([np.column_stack([u, v]), border, np.column_stack([gu.ravel(), gv.ravel()])])
    uv = np.unique(uv, axis=0)
    simplices = Delaunay(uv).simplices.astype(np.int64)
    vertices = _torus_points(major, minor, uv[:, 0], uv[:, 1])
    return positions, normals, _drop_slivers(vertices, simplices)


_SAMPLERS: dict[str, Callable] = {
    "plane": _sample_plane,
    "cube": _sample_cube,
    "sphere": _sample_sphere,
    "cylinder": _sample_cylinder,
    "wedge": _sample_wedge,
    "torus": _sample_torus,
}


def sample_shape(spec: ShapeSpec) -> tuple[PointCloud, TriangleMesh]:
    """
    Sample a shape uniformly by surface area.

    Returns:
        Tuple of (cloud with exact analytic normals, mesh of the same surface).
        Every sampled point lies on the mesh.

    Raises:
        ArgumentError: For an unknown kind or invalid dimensions.
    """
    params = spec.resolved_parameters()
    rng = np.random.default_rng(spec.seed)
    positions, normals, mesh = _SAMPLERS[spec.kind](params, spec.point_count, rng)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(positions, normals), mesh
