"""Mini-batch SGD training of the patch network on a dataset manifest."""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from pointfilter.cloud import PointCloud, bbox_diagonal, build_index, load_cloud
from pointfilter.dataset import DatasetManifest
from pointfilter.errors import (
    ArgumentError,
    DegeneratePatchError,
    TrainingError,
    WriteError,
)
from pointfilter.losses import LOSS_KINDS, LossParams, total_loss
from pointfilter.network import (
    Architecture,
    NetworkParams,
    backward,
    forward,
    init_params,
    sgd_step,
)
from pointfilter.patches import (
    CanonicalPatchPair,
    canonicalize,
    extract_patch_pair,
)

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}

# Decoder batch norm normalizes over the batch; one patch leaves it nothing to normalize.
MIN_BATCH_SIZE = 2


def resolve_seed(seed: int | None, deterministic: bool) -> int:
    """Seed to run with: the given one, 0 for deterministic runs, else fresh entropy."""
    if seed is not None:
        return int(seed)
    if deterministic:
        return 0
    fresh = int(np.random.SeedSequence().entropy % (2**63))
    logger.info("no seed given, using %d", fresh)
    return fresh


@dataclass(frozen=True)
class TrainConfig:
    """
    Hyperparameters of one training run.

    `patch_size` and `radius_fraction` left as None take the manifest's
    values when training starts.
    """

    epochs: int = 50
    batch_size: int = 64
    lr_start: float = 1e-4
    lr_end: float = 1e-8
    eta: float = 0.97
    sigma_n: float = 15.0
    patch_size: int | None = None
    radius_fraction: float | None = None
    loss_kind: str = "proj_b"
    seed: int | None = None
    deterministic: bool = False
    architecture: Architecture = field(default_factory=Architecture)
    precision: str = "float32"
    # Overrides the manifest's patches_per_model when set.
    patches_per_model: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < MIN_BATCH_SIZE:
            raise ArgumentError(f"batch_size must be at least {MIN_BATCH_SIZE}, got {self.batch_size}")
        if not self.lr_start >= self.lr_end > 0:
            raise ArgumentError(f"need lr_start >= lr_end > 0, got {self.lr_start} and {self.lr_end}")
        if self.patch_size is not None and self.patch_size < 1:
            raise ArgumentError(f"patch_size must be positive, got {self.patch_size}")
        if self.radius_fraction is not None and not self.radius_fraction > 0:
            raise ArgumentError(f"radius_fraction must be positive, got {self.radius_fraction}")
        if self.loss_kind not in LOSS_KINDS:
            raise ArgumentError(f"unknown loss kind {self.loss_kind!r}; expected one of {', '.join(LOSS_KINDS)}")
        if self.precision not in PRECISIONS:
            raise ArgumentError(f"precision must be one of {', '.join(PRECISIONS)}, got {self.precision!r}")
        if self.patches_per_model is not None and self.patches_per_model < 1:
            raise ArgumentError(f"patches_per_model must be positive, got {self.patches_per_model}")
        # Validates eta and sigma_n.
        self.loss_params()

    def loss_params(self) -> LossParams:
        return LossParams(eta=self.eta, sigma_n=self.sigma_n)

    def for_manifest(self, manifest: DatasetManifest) -> "TrainConfig":
        """Copy with unset patch settings filled from the manifest header."""
        return replace(
            self,
            patch_size=manifest.patch_size if self.patch_size is None else self.patch_size,
            radius_fraction=manifest.radius_fraction if self.radius_fraction is None else self.radius_fraction,
        )


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Geometric decay from lr_start at epoch 0 to lr_end at the last epoch."""
    if not 0 <= epoch < config.epochs:
        raise ArgumentError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs == 1:
        return config.lr_start
    if epoch == config.epochs - 1:
        return config.lr_end
    ratio = config.lr_end / config.lr_start
    return config.lr_start * ratio ** (epoch / (config.epochs - 1))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    skipped_patches: int

    def format(self) -> str:
        return f"{self.epoch}, {self.lr!r}, {self.mean_loss!r}, {self.skipped_patches}"


@dataclass
class TrainingLog:
    """Per-epoch records, one `epoch, lr, mean_loss, skipped_patches` line each."""

    records: list[EpochRecord] = field(default_factory=list)

    def format(self) -> str:
        return "".join(record.format() + "\n" for record in self.records)

    def write(self, path: Path | str) -> None:
        try:
            Path(path).write_text(self.format())
        except OSError as e:
            raise WriteError(f"cannot write {path}: {e}")


@dataclass
class TrainingResult:
    params: NetworkParams
    log: TrainingLog


@dataclass(frozen=True, eq=False)
class _Model:
    noisy: PointCloud
    clean: PointCloud
    indices: tuple
    radius: float


def _load_models(manifest: DatasetManifest, radius_fraction: float) -> list[_Model]:
    models = []
    for entry in manifest.entries:
        noisy = load_cloud(entry.noisy_path)
        clean = load_cloud(entry.clean_path)
        if not clean.has_normals:
            raise ArgumentError(f"ground-truth cloud {entry.clean_path} has no normals")
        radius = radius_fraction * bbox_diagonal(noisy)
        models.append(_Model(noisy, clean, (build_index(noisy), build_index(clean)), radius))
    return models


def _canonical_batch(
    models: list[_Model],
    centers: np.ndarray,
    patch_size: int,
    rng: np.random.Generator,
) -> tuple[list[CanonicalPatchPair], int]:
    patches, skipped = [], 0
    for model_id, center_index in centers:
        model = models[model_id]
        try:
            raw = extract_patch_pair(model.noisy, model.clean, int(center_index), model.radius, model.indices)
        except DegeneratePatchError as e:
            logger.debug("skipping patch: %s", e)
            skipped += 1
            continue
        patch = canonicalize(raw, patch_size, rng)
        # Identity-aligned patches are only used at inference time.
        if patch.degenerate:
            logger.debug("skipping patch at %s without a principal frame", patch.center)
            skipped += 1
            continue
        patches.append(patch)
    return patches, skipped


def batch_slices(total: int, batch_size: int) -> list[slice]:
    """Consecutive mini-batches of `batch_size`; a one-item remainder joins the batch before it."""
    slices = [slice(start, min(start + batch_size, total)) for start in range(0, total, batch_size)]
    if len(slices) > 1 and slices[-1].stop - slices[-1].start < MIN_BATCH_SIZE:
        last = slices.pop()
        slices[-1] = slice(slices[-1].start, last.stop)
    return slices


def train_step(
    params: NetworkParams,
    patches: list[CanonicalPatchPair],
    lr: float,
    loss_params: LossParams,
    loss_kind: str,
) -> tuple[NetworkParams, list[float]]:
    """
    One SGD step on the batch-mean loss.

    Returns:
        Tuple of (updated parameters, per-patch total losses).

    Raises:
        ArgumentError: With fewer than MIN_BATCH_SIZE patches.
    """
    if len(patches) < MIN_BATCH_SIZE:
        raise ArgumentError(f"a training step needs at least {MIN_BATCH_SIZE} patches, got {len(patches)}")
    batch = np.stack([patch.noisy_points for patch in patches])
    displacements, cache = forward(params, batch, mode="train")

    totals, upstream = [], np.empty((len(patches), 3))
    for row, (d, patch) in enumerate(zip(displacements, patches)):
        terms = total_loss(d.astype(np.float64), patch, loss_params, loss_kind)
        totals.append(terms.total)
        upstream[row] = terms.grad_wrt_displacement
    grads = backward(params, cache, upstream / len(patches))
    return sgd_step(params, grads, lr), totals


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainingResult:
    """
    Train a fresh network on every entry of `manifest`.

    Each epoch draws new random centers from every model, canonicalizes the
    patches around them, shuffles, and takes one SGD step per mini-batch.
    Patches without ground truth inside the radius, or without a principal
    frame, are skipped and counted, as is a lone patch left over in a batch.
    Unset patch settings come from the manifest header.

    Raises:
        TrainingError: If the manifest is empty or every patch of an epoch is degenerate.
    """
    if not manifest.entries:
        raise TrainingError("manifest has no entries")
    config = config.for_manifest(manifest)
    seed = resolve_seed(config.seed, config.deterministic)
    models = _load_models(manifest, config.radius_fraction)
    per_model = config.patches_per_model or manifest.patches_per_model
    loss_params = config.loss_params()

    params = init_params(config.architecture, seed).astype(PRECISIONS[config.precision])
    params.metadata.update(
        patch_size=str(config.patch_size),
        radius_fraction=repr(config.radius_fraction),
        loss=config.loss_kind,
        seed=str(seed),
    )
    log = TrainingLog()
    logger.info(
        "training on %d models, %d patches per model per epoch, %d epochs",
        len(models), per_model, config.epochs,
    )

    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        centers = np.concatenate([
            np.column_stack([np.full(per_model, m), rng.integers(0, len(model.noisy), size=per_model)])
            for m, model in enumerate(models)
        ])
        centers = centers[rng.permutation(len(centers))]
        lr = lr_schedule(epoch, config)

        losses: list[float] = []
        skipped = 0
        for batch in batch_slices(len(centers), config.batch_size):
            patches, batch_skipped = _canonical_batch(models, centers[batch], config.patch_size, rng)
            skipped += batch_skipped
            if len(patches) < MIN_BATCH_SIZE:
                if patches:
                    logger.debug("skipping a batch left with a single patch")
                skipped += len(patches)
                continue
            params, batch_losses = train_step(params, patches, lr, loss_params, config.loss_kind)
            losses.extend(batch_losses)

        if not losses:
            raise TrainingError(f"every patch of epoch {epoch} was degenerate")
        if skipped:
            logger.info("epoch %d skipped %d degenerate patches", epoch, skipped)
        record = EpochRecord(epoch, lr, float(np.mean(losses)), skipped)
        log.records.append(record)
        logger.info("epoch %d lr=%.3g loss=%.6g", epoch, lr, record.mean_loss)
        if on_epoch is not None:
            on_epoch(record)

    return TrainingResult(params, log)
