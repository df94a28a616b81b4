"""Noise models and training manifests built from procedural shapes."""

import logging
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pointfilter.cloud import PointCloud, bbox_diagonal, save_cloud, save_mesh
from pointfilter.errors import (
    ArgumentError,
    EmptyInputError,
    FileError,
    ParseError,
    WriteError,
)
from pointfilter.patches import DEFAULT_PATCH_SIZE, DEFAULT_RADIUS_FRACTION
from pointfilter.shapes import ShapeSpec, sample_shape

logger = logging.getLogger(__name__)

NOISE_KINDS = ("gaussian", "impulsive", "uniform")

IMPULSIVE_FRACTION = 0.1
IMPULSIVE_SCALE = 5.0

DEFAULT_NOISE_LEVELS = (0.0, 0.0025, 0.005, 0.01, 0.015, 0.025)
DEFAULT_PATCHES_PER_MODEL = 8000

MANIFEST_NAME = "manifest.txt"
HOLDOUT_NAME = "holdout.txt"


@dataclass(frozen=True)
class NoiseSpec:
    """Noise kind, level as a fraction of the bounding-box diagonal, and seed."""

    kind: str = "gaussian"
    level: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ArgumentError(f"unknown noise kind {self.kind!r}; expected one of {', '.join(NOISE_KINDS)}")
        if not (self.level >= 0 and math.isfinite(self.level)):
            raise ArgumentError(f"noise level must be non-negative, got {self.level}")


def add_noise(clean: PointCloud, spec: NoiseSpec) -> PointCloud:
    """
    Corrupt a clean cloud; the result keeps point count and order but no normals.

    gaussian: every coordinate gets N(0, s) with s = level * diagonal.
    impulsive: ceil(10% of n) random points get N(0, 5 s), the rest are untouched.
    uniform: every coordinate gets U(-a, a) with a = level * diagonal.
    """
    if len(clean) == 0:
        raise EmptyInputError("cannot add noise to an empty cloud")
    rng = np.random.default_rng(spec.seed)
    scale = spec.level * bbox_diagonal(clean)
    positions = clean.positions.copy()
    n = len(positions)

    if spec.kind == "gaussian":
        positions += rng.normal(0.0, scale, size=(n, 3))
    elif spec.kind == "uniform":
        positions += rng.uniform(-scale, scale, size=(n, 3))
    else:
        hit = rng.choice(n, size=math.ceil(IMPULSIVE_FRACTION * n), replace=False)
        positions[hit] += rng.normal(0.0, IMPULSIVE_SCALE * scale, size=(len(hit), 3))
    return PointCloud(positions)


@dataclass(frozen=True)
class ManifestEntry:
    clean_path: Path
    noisy_path: Path
    level: float


@dataclass
class DatasetManifest:
    """Clean/noisy cloud pairs plus the patch sampling settings for training."""

    entries: list[ManifestEntry] = field(default_factory=list)
    patches_per_model: int = DEFAULT_PATCHES_PER_MODEL
    patch_size: int = DEFAULT_PATCH_SIZE
    radius_fraction: float = DEFAULT_RADIUS_FRACTION

    def __post_init__(self):
        if not self.radius_fraction > 0:
            raise ArgumentError(f"radius_fraction must be positive, got {self.radius_fraction}")
        if self.patch_size < 1 or self.patches_per_model < 1:
            raise ArgumentError("patch_size and patches_per_model must be positive")


def write_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    """Write a manifest; entry paths are stored relative to the manifest's directory."""
    path = Path(path)
    base = path.resolve().parent
    lines = [
        f"# patch_size={manifest.patch_size} radius_fraction={manifest.radius_fraction!r} "
        f"patches_per_model={manifest.patches_per_model}"
    ]
    for entry in manifest.entries:
        clean = os.path.relpath(Path(entry.clean_path).resolve(), base)
        noisy = os.path.relpath(Path(entry.noisy_path).resolve(), base)
        lines.append(f"{clean} {noisy} {entry.level!r}")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise WriteError(f"cannot write {path}: {e}")


def read_manifest(path: Path | str) -> DatasetManifest:
    """Read a manifest written by `write_manifest`; paths resolve against its directory."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise FileError(f"cannot read manifest {path}: {e}")

    base = path.resolve().parent
    settings: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    for line_number, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            for token in stripped[1:].split():
                key, sep, value = token.partition("=")
                if not sep:
                    raise ParseError(f"bad header token {token!r}", path, line_number)
                settings[key] = value
            continue
        tokens = stripped.split()
        if len(tokens) != 3:
            raise ParseError(f"expected '<clean> <noisy> <level>', got {len(tokens)} fields", path, line_number)
        try:
            level = float(tokens[2])
        except ValueError:
            raise ParseError(f"non-numeric noise level {tokens[2]!r}", path, line_number)
        entries.append(ManifestEntry((base / tokens[0]).resolve(), (base / tokens[1]).resolve(), level))

    try:
        return DatasetManifest(
            entries=entries,
            patches_per_model=int(settings.get("patches_per_model", DEFAULT_PATCHES_PER_MODEL)),
            patch_size=int(settings.get("patch_size", DEFAULT_PATCH_SIZE)),
            radius_fraction=float(settings.get("radius_fraction", DEFAULT_RADIUS_FRACTION)),
        )
    except ValueError as e:
        raise ParseError(f"bad manifest header: {e}", path)


def _level_tag(level: float) -> str:
    return f"{level * 100:g}".replace(".", "p")


def build_manifest(
    shapes: Sequence[ShapeSpec],
    levels: Sequence[float],
    out_dir: Path | str,
    patches_per_model: int = DEFAULT_PATCHES_PER_MODEL,
    *,
    patch_size: int = DEFAULT_PATCH_SIZE,
    radius_fraction: float = DEFAULT_RADIUS_FRACTION,
    noise_kind: str = "gaussian",
    seed: int = 0,
    holdout_kind: str | None = None,
) -> DatasetManifest:
    """
    Generate clean, mesh and noisy files for every shape x level pair.

    Each noisy cloud draws from its own stream seeded by (seed, entry index).
    Entries whose shape kind equals `holdout_kind` go to a separate
    `holdout.txt` manifest instead of `manifest.txt`.

    Returns:
        The training manifest (already written to `out_dir/manifest.txt`).
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise WriteError(f"cannot create {out_dir}: {e}")

    train = DatasetManifest([], patches_per_model, patch_size, radius_fraction)
    holdout = DatasetManifest([], patches_per_model, patch_size, radius_fraction)
    entry_index = 0
    for shape_index, spec in enumerate(shapes):
        clean, mesh = sample_shape(spec)
        stem = f"{spec.kind}-{shape_index}"
        clean_path = (out_dir / f"{stem}.xyz").resolve()
        save_cloud(clean, clean_path)
        save_mesh(mesh, out_dir / f"{stem}.off")

        for level in levels:
            noise_seed = int(np.random.SeedSequence([seed, entry_index]).generate_state(1)[0])
            noisy = add_noise(clean, NoiseSpec(noise_kind, level, noise_seed))
            noisy_path = (out_dir / f"{stem}-{noise_kind}{_level_tag(level)}.xyz").resolve()
            save_cloud(noisy, noisy_path)
            target = holdout if spec.kind == holdout_kind else train
            target.entries.append(ManifestEntry(clean_path, noisy_path, float(level)))
            entry_index += 1
        logger.info("wrote %s with %d points and %d noise levels", stem, len(clean), len(levels))

    write_manifest(train, out_dir / MANIFEST_NAME)
    if holdout_kind is not None:
        write_manifest(holdout, out_dir / HOLDOUT_NAME)
    return train
