"""Main CLI entry point for pointfilter."""

import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from pointfilter.cloud import PointCloud, load_cloud, load_mesh, save_cloud
from pointfilter.config import CliConfig, parse_cli
from pointfilter.dataset import HOLDOUT_NAME, MANIFEST_NAME, NoiseSpec, add_noise, build_manifest, read_manifest
from pointfilter.errors import PointfilterError, WriteError
from pointfilter.inference import DEFAULT_CHUNK_SIZE, FilterConfig, FilterResult, filter_cloud
from pointfilter.metrics import MetricReport, evaluate, save_error_map
from pointfilter.network import Architecture, load_params, save_params
from pointfilter.patches import DEFAULT_PATCH_SIZE, DEFAULT_RADIUS_FRACTION
from pointfilter.shapes import ShapeSpec
from pointfilter.training import EpochRecord, TrainConfig, TrainingResult, resolve_seed, train

console = Console()
err_console = Console(stderr=True)

logger = logging.getLogger("pointfilter")


def configure_logging(verbosity: int) -> None:
    """Route library logging through a rich handler on stderr."""
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _epoch_progress(label: str) -> Progress:
    return Progress(
        TextColumn(f"[cyan]{label}[/cyan]"),
        BarColumn(),
        TextColumn("epoch {task.completed}/{task.total}"),
        TextColumn("{task.fields[loss]}"),
        TimeElapsedColumn(),
        console=err_console,
        transient=True,
    )


def _train_with_progress(manifest, config: TrainConfig, label: str) -> TrainingResult:
    with _epoch_progress(label) as progress:
        task = progress.add_task(label, total=config.epochs, loss="")

        def on_epoch(record: EpochRecord) -> None:
            progress.update(task, advance=1, loss=f"loss {record.mean_loss:.4g}")

        return train(manifest, config, on_epoch=on_epoch)


def _train_config(cfg: CliConfig, **overrides) -> TrainConfig:
    values = {
        "epochs": cfg["epochs"],
        "batch_size": cfg["batch_size"],
        "lr_start": cfg["lr_start"],
        "lr_end": cfg["lr_end"],
        "sigma_n": cfg["sigma_n"],
        "patch_size": cfg["patch_size"],
        "radius_fraction": cfg["radius_fraction"],
        "seed": cfg["seed"],
        "deterministic": cfg["deterministic"],
        "architecture": Architecture(tuple(cfg["encoder"]), tuple(cfg["decoder"])),
        "precision": cfg["precision"],
        "patches_per_model": cfg["patches_per_model"],
    }
    values.update(overrides)
    return TrainConfig(**values)


def cmd_gen(cfg: CliConfig) -> int:
    """Generate clean shapes, noisy copies and the manifest."""
    seed = resolve_seed(cfg["seed"], cfg["deterministic"])
    shapes = [
        ShapeSpec(kind, point_count=cfg["points"], seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
        for i, kind in enumerate(cfg["shapes"])
    ]
    out_dir: Path = cfg["out"]
    console.print(f"[bold]Generating {len(shapes)} shape(s) into {out_dir}...[/bold]")
    manifest = build_manifest(
        shapes,
        cfg["levels"],
        out_dir,
        cfg["patches_per_model"],
        patch_size=cfg["patch_size"],
        radius_fraction=cfg["radius_fraction"],
        noise_kind=cfg["noise"],
        seed=seed,
        holdout_kind=cfg["holdout"],
    )

    levels = ", ".join(f"{level:g}" for level in cfg["levels"])
    console.print(f"[green]✓[/green] {len(shapes)} model(s), {cfg['points']} points each, {cfg['noise']} noise levels {levels}")
    console.print(f"[green]✓[/green] {len(manifest.entries)} training pair(s) in {out_dir / MANIFEST_NAME}")
    if cfg["holdout"] is not None:
        console.print(f"[green]✓[/green] {cfg['holdout']} pairs held out in {out_dir / HOLDOUT_NAME}")
    return 0


def cmd_train(cfg: CliConfig) -> int:
    """Train a network and write the parameter file plus its log."""
    manifest = read_manifest(cfg["manifest"])
    config = _train_config(cfg, eta=cfg["eta"], loss_kind=cfg["loss"]).for_manifest(manifest)
    console.print(
        f"[bold]Training[/bold] on {len(manifest.entries)} pair(s) with loss [cyan]{config.loss_kind}[/cyan], "
        f"{config.epochs} epoch(s), batch {config.batch_size}, patch size {config.patch_size}"
    )
    result = _train_with_progress(manifest, config, "train")

    out: Path = cfg["out"]
    log_path: Path = cfg["log"] or Path(f"{out}.log")
    save_params(result.params, out)
    result.log.write(log_path)

    table = Table(title="Training log")
    for column in ("epoch", "lr", "mean loss", "skipped"):
        table.add_column(column, justify="right")
    for record in result.log.records:
        table.add_row(str(record.epoch), f"{record.lr:.3g}", f"{record.mean_loss:.6g}", str(record.skipped_patches))
    console.print(table)
    console.print(f"[green]✓[/green] Model written to {out}")
    console.print(f"[green]✓[/green] Log written to {log_path}")
    return 0


def _filter_config(cfg: CliConfig, metadata: dict[str, str], iterations: int, patch_size=None, radius_fraction=None) -> FilterConfig:
    if patch_size is None:
        patch_size = int(metadata.get("patch_size", DEFAULT_PATCH_SIZE))
    if radius_fraction is None:
        radius_fraction = float(metadata.get("radius_fraction", DEFAULT_RADIUS_FRACTION))
    return FilterConfig(
        iterations=iterations,
        patch_size=patch_size,
        radius_fraction=radius_fraction,
        deterministic=cfg["deterministic"],
        seed=cfg["seed"],
        threads=cfg["threads"],
        chunk_size=cfg.get("chunk_size", DEFAULT_CHUNK_SIZE),
        precision=cfg["precision"],
    )


def _report_filter(result: FilterResult) -> None:
    summary = result.summary
    console.print(f"[green]✓[/green] Filtered {summary.points} points in {summary.iterations} pass(es)")
    if summary.isolated:
        console.print(f"[yellow]![/yellow] {summary.isolated} isolated point visit(s) left unchanged")


def cmd_filter(cfg: CliConfig) -> int:
    """Filter a noisy cloud with a trained model."""
    params = load_params(cfg["model"])
    noisy = load_cloud(cfg["input"])
    config = _filter_config(cfg, params.metadata, cfg["iters"], cfg["patch_size"], cfg["radius_fraction"])
    console.print(
        f"[bold]Filtering[/bold] {len(noisy)} points with {cfg['model']} "
        f"({config.iterations} pass(es), patch size {config.patch_size}, {config.threads} thread(s))"
    )
    result = filter_cloud(params, noisy, config)
    save_cloud(result.cloud, cfg["out"])
    _report_filter(result)
    console.print(f"[green]✓[/green] Written to {cfg['out']}")
    return 0


def cmd_eval(cfg: CliConfig) -> int:
    """Print `cd=.. mse=.. [p2f=..]` for a filtered cloud."""
    clean = load_cloud(cfg["clean"])
    filtered = load_cloud(cfg["filtered"])
    mesh = load_mesh(cfg["p2f"]) if cfg["p2f"] is not None else None
    report = evaluate(clean, filtered, mesh, cfg["m"])
    console.print(report.format(), markup=False, highlight=False, soft_wrap=True)
    if cfg["errors"] is not None:
        save_error_map(clean, report.per_point_mse, cfg["errors"])
        logger.info("per-point errors written to %s", cfg["errors"])
    return 0


def _metric_cells(report: MetricReport) -> list[str]:
    cells = [f"{report.cd:.6g}", f"{report.mse:.6g}"]
    if report.p2f is not None:
        cells.append(f"{report.p2f:.6g}")
    return cells


def _ablation_inputs(cfg: CliConfig, clean: PointCloud) -> list[tuple[str, PointCloud]]:
    """Held-out noisy cloud and/or the clean cloud corrupted at each sweep level."""
    inputs = []
    if cfg["noisy"] is not None:
        inputs.append(("held-out", load_cloud(cfg["noisy"])))
    if cfg["levels"]:
        seed = resolve_seed(cfg["seed"], cfg["deterministic"])
        for i, level in enumerate(cfg["levels"]):
            noise_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            inputs.append((f"{level:g}", add_noise(clean, NoiseSpec(cfg["noise"], level, noise_seed))))
    return inputs


def cmd_ablate(cfg: CliConfig) -> int:
    """Train one model per (loss, eta) pair and compare them on held-out clouds."""
    manifest = read_manifest(cfg["manifest"])
    clean = load_cloud(cfg["clean"])
    mesh = load_mesh(cfg["mesh"]) if cfg["mesh"] is not None else None
    inputs = _ablation_inputs(cfg, clean)
    out_dir: Path | None = cfg["out"]
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise WriteError(f"cannot create {out_dir}: {e}")

    table = Table(title="Loss ablation on held-out clouds")
    for column in ("loss", "eta", "input", "cd", "mse", *(("p2f",) if mesh is not None else ())):
        table.add_column(column, justify="right")
    for name, noisy in inputs:
        table.add_row("noisy", "-", name, *_metric_cells(evaluate(clean, noisy, mesh)))

    for loss_kind in cfg["losses"]:
        for eta in cfg["etas"]:
            label = f"{loss_kind} eta={eta:g}"
            config = _train_config(cfg, eta=eta, loss_kind=loss_kind)
            result = _train_with_progress(manifest, config, label)
            filter_config = _filter_config(cfg, result.params.metadata, cfg["iters"])
            stem = f"{loss_kind}-eta{eta:g}"
            if out_dir is not None:
                save_params(result.params, out_dir / f"{stem}.pf")
                result.log.write(out_dir / f"{stem}.log")

            for name, noisy in inputs:
                filtered = filter_cloud(result.params, noisy, filter_config).cloud
                report = evaluate(clean, filtered, mesh)
                table.add_row(loss_kind, f"{eta:g}", name, *_metric_cells(report))
                logger.info("%s on %s: %s", label, name, report.format())
                if out_dir is not None:
                    suffix = "" if name == "held-out" else f"-level{name}"
                    save_cloud(filtered, out_dir / f"{stem}{suffix}-filtered.xyz")

    console.print(table)
    return 0


COMMAND_HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "filter": cmd_filter,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Run one CLI invocation and return its exit status."""
    args = list(sys.argv[1:] if argv is None else argv)
    debug = "--debug" in args
    try:
        cfg = parse_cli(args)
        configure_logging(cfg.verbosity)
        return COMMAND_HANDLERS[cfg.command](cfg)
    except KeyboardInterrupt:
        err_console.print("\n[yellow]Cancelled by user.[/yellow]")
        return 130
    except PointfilterError as e:
        err_console.print(f"{e.prefix}: {e}", markup=False, highlight=False, soft_wrap=True)
        if debug:
            raise
        return e.exit_code
    except Exception as e:
        err_console.print(f"unexpected error: {e}", markup=False, highlight=False, soft_wrap=True)
        if debug:
            raise
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
