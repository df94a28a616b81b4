"""
Command-line and config-file options.

Each subcommand declares its options once. Values may come from a flag, from
a flat TOML file passed with `--config`, or from the built-in default, in that
order of precedence, and every value goes through the same converter.
"""

import argparse
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from pointfilter.dataset import DEFAULT_NOISE_LEVELS, DEFAULT_PATCHES_PER_MODEL, NOISE_KINDS
from pointfilter.errors import UsageError
from pointfilter.inference import DEFAULT_CHUNK_SIZE
from pointfilter.losses import LOSS_KINDS
from pointfilter.patches import DEFAULT_PATCH_SIZE, DEFAULT_RADIUS_FRACTION
from pointfilter.shapes import SHAPE_KINDS
from pointfilter.training import MIN_BATCH_SIZE, PRECISIONS


# Converters accept either the raw flag string or the native TOML value and
# raise ValueError with a short reason.

def _number(value: Any, kind: type) -> Any:
    if isinstance(value, bool):
        raise ValueError("expected a number")
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ValueError(f"expected an integer, got {value}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ValueError(f"expected {'an integer' if kind is int else 'a number'}, got {value!r}")


def positive_int(value: Any) -> int:
    number = _number(value, int)
    if number < 1:
        raise ValueError(f"must be at least 1, got {number}")
    return number


def batch_size(value: Any) -> int:
    number = _number(value, int)
    if number < MIN_BATCH_SIZE:
        raise ValueError(f"must be at least {MIN_BATCH_SIZE}, got {number}")
    return number


def integer(value: Any) -> int:
    return _number(value, int)


def positive_float(value: Any) -> float:
    number = _number(value, float)
    if not number > 0:
        raise ValueError(f"must be positive, got {number}")
    return number


def unit_interval(value: Any) -> float:
    number = _number(value, float)
    if not 0.0 <= number <= 1.0:
        raise ValueError(f"must be within [0, 1], got {number}")
    return number


def angle(value: Any) -> float:
    number = _number(value, float)
    if not 0.0 < number < 90.0:
        raise ValueError(f"must be within (0, 90) degrees, got {number}")
    return number


def path(value: Any) -> Path:
    if not isinstance(value, (str, Path)) or not str(value):
        raise ValueError("expected a path")
    return Path(value)


def boolean(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    raise ValueError(f"expected true or false, got {value!r}")


def choice(*allowed: str) -> Callable[[Any], str]:
    def convert(value: Any) -> str:
        if value not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {value!r}")
        return value

    return convert


def list_of(item: Callable[[Any], Any]) -> Callable[[Any], list]:
    """Comma-separated string or TOML array, each element converted by `item`."""

    def convert(value: Any) -> list:
        if isinstance(value, str):
            parts = [part.strip() for part in value.split(",") if part.strip()]
        elif isinstance(value, list):
            parts = value
        else:
            raise ValueError(f"expected a list, got {value!r}")
        if not parts:
            raise ValueError("expected at least one value")
        return [item(part) for part in parts]

    return convert


def non_negative_float(value: Any) -> float:
    number = _number(value, float)
    if not number >= 0:
        raise ValueError(f"must be non-negative, got {number}")
    return number


@dataclass(frozen=True)
class Option:
    name: str
    convert: Callable[[Any], Any]
    default: Any = None
    help: str = ""
    required: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


_SEED = Option("seed", integer, None, "random seed; defaults to 0 with --deterministic, else fresh entropy")
_DETERMINISTIC = Option("deterministic", boolean, False, "fix every random stream and reduction order")
_PATCH_SIZE = Option("patch_size", positive_int, DEFAULT_PATCH_SIZE, "points per network input patch")
_RADIUS = Option("radius_fraction", positive_float, DEFAULT_RADIUS_FRACTION, "patch radius as a fraction of the bbox diagonal")
_PRECISION = Option("precision", choice(*PRECISIONS), "float32", "floating point precision of the network")
_THREADS = Option("threads", positive_int, 1, "worker threads for per-point filtering")

_TRAINING = [
    Option("epochs", positive_int, 50, "training epochs"),
    Option("batch_size", batch_size, 64, "patches per SGD step"),
    Option("lr_start", positive_float, 1e-4, "learning rate of the first epoch"),
    Option("lr_end", positive_float, 1e-8, "learning rate of the last epoch"),
    Option("eta", unit_interval, 0.97, "weight of the projection term against repulsion"),
    Option("sigma_n", angle, 15.0, "normal support angle in degrees"),
    Option("patch_size", positive_int, None, "points per network input patch (default: the manifest's value)"),
    Option("radius_fraction", positive_float, None, "patch radius fraction (default: the manifest's value)"),
    Option("patches_per_model", positive_int, None, "override the manifest's patches per model per epoch"),
    Option("encoder", list_of(positive_int), [64, 128, 256, 512, 1024], "encoder layer widths"),
    Option("decoder", list_of(positive_int), [512, 256, 3], "decoder layer widths, ending in 3"),
    _PRECISION,
]

COMMANDS: dict[str, dict[str, Any]] = {
    "gen": {
        "help": "generate synthetic clean/noisy clouds and a training manifest",
        "example": "pointfilter gen --shapes cube,sphere --points 5000 --levels 0.005,0.01 --out data/",
        "options": [
            Option("shapes", list_of(choice(*SHAPE_KINDS)), ["cube", "sphere", "wedge"], "comma-separated shape kinds"),
            Option("points", positive_int, 10_000, "points sampled per shape"),
            Option("levels", list_of(non_negative_float), list(DEFAULT_NOISE_LEVELS), "noise levels as fractions of the bbox diagonal"),
            Option("noise", choice(*NOISE_KINDS), "gaussian", "noise kind"),
            Option("patches_per_model", positive_int, DEFAULT_PATCHES_PER_MODEL, "patches drawn per model per epoch"),
            _PATCH_SIZE,
            _RADIUS,
            Option("holdout", choice(*SHAPE_KINDS), None, "shape kind written to holdout.txt instead of the manifest"),
            Option("out", path, None, "output directory", required=True),
            _SEED,
            _DETERMINISTIC,
        ],
    },
    "train": {
        "help": "train a network on a manifest",
        "example": "pointfilter train --manifest data/manifest.txt --epochs 2 --patch-size 64 --out model.pf",
        "options": [
            Option("manifest", path, None, "training manifest", required=True),
            Option("out", path, None, "parameter file to write", required=True),
            Option("log", path, None, "training log file (default: <out>.log)"),
            *_TRAINING,
            Option("loss", choice(*LOSS_KINDS), "proj_b", "training loss"),
            _SEED,
            _DETERMINISTIC,
        ],
    },
    "filter": {
        "help": "filter a noisy cloud with a trained network",
        "example": "pointfilter filter --model model.pf --input noisy.xyz --out filtered.xyz --iters 2",
        "options": [
            Option("model", path, None, "parameter file", required=True),
            Option("input", path, None, "noisy cloud", required=True),
            Option("out", path, None, "filtered cloud to write", required=True),
            Option("iters", positive_int, 2, "filtering passes"),
            Option("patch_size", positive_int, None, "patch size (default: the model's training value)"),
            Option("radius_fraction", positive_float, None, "patch radius fraction (default: the model's training value)"),
            Option("chunk_size", positive_int, DEFAULT_CHUNK_SIZE, "points per work item"),
            _THREADS,
            _PRECISION,
            _SEED,
            _DETERMINISTIC,
        ],
    },
    "eval": {
        "help": "compare a filtered cloud against ground truth",
        "example": "pointfilter eval --clean cube-0.xyz --filtered filtered.xyz --p2f cube-0.off",
        "options": [
            Option("clean", path, None, "ground-truth cloud", required=True),
            Option("filtered", path, None, "filtered cloud", required=True),
            Option("p2f", path, None, "ground-truth OFF mesh; adds the point-to-surface distance"),
            Option("errors", path, None, "write per-point MSE as `x y z error` lines"),
            Option("m", positive_int, 10, "neighbors per clean point in the MSE"),
        ],
    },
    "ablate": {
        "help": "train one model per loss kind and eta, then compare them on held-out clouds",
        "example": "pointfilter ablate --manifest data/manifest.txt --noisy held.xyz --clean held-clean.xyz --epochs 5",
        "options": [
            Option("manifest", path, None, "training manifest", required=True),
            Option("noisy", path, None, "held-out noisy cloud"),
            Option("levels", list_of(non_negative_float), None, "also corrupt the clean cloud at each of these noise levels"),
            Option("noise", choice(*NOISE_KINDS), "gaussian", "noise kind for --levels"),
            Option("clean", path, None, "held-out ground-truth cloud", required=True),
            Option("mesh", path, None, "held-out ground-truth mesh for p2f"),
            Option("losses", list_of(choice(*LOSS_KINDS)), list(LOSS_KINDS), "loss kinds to compare"),
            Option("etas", list_of(unit_interval), [0.97], "projection weights to sweep"),
            Option("out", path, None, "directory for trained models and filtered clouds"),
            Option("iters", positive_int, 2, "filtering passes"),
            *[option for option in _TRAINING if option.name != "eta"],
            _THREADS,
            _SEED,
            _DETERMINISTIC,
        ],
    },
}


@dataclass
class CliConfig:
    """A parsed subcommand with every option resolved and validated."""

    command: str
    values: dict[str, Any] = field(default_factory=dict)
    config_path: Path | None = None
    verbosity: int = 0
    debug: bool = False

    def __getitem__(self, name: str) -> Any:
        return self.values[name]

    def get(self, name: str, default: Any = None) -> Any:
        value = self.values.get(name)
        return default if value is None else value


class ArgumentParser(argparse.ArgumentParser):
    """Parser whose errors surface as UsageError instead of exiting."""

    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="pointfilter",
        description="Patch-based point cloud denoising: generate data, train, filter and evaluate.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for debug output)")
    parser.add_argument("--debug", action="store_true", help="re-raise unexpected errors with a traceback")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True

    for name, command in COMMANDS.items():
        sub = subparsers.add_parser(
            name,
            help=command["help"],
            description=command["help"],
            epilog=f"example:\n  {command['example']}",
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        sub.add_argument("--config", type=Path, default=None, help="flat TOML file of option defaults")
        for option in command["options"]:
            if option.convert is boolean:
                sub.add_argument(
                    option.flag,
                    dest=option.name,
                    action=argparse.BooleanOptionalAction,
                    default=argparse.SUPPRESS,
                    help=option.help,
                )
            else:
                sub.add_argument(
                    option.flag,
                    dest=option.name,
                    default=argparse.SUPPRESS,
                    help=f"{option.help} (default: {_describe(option.default)})" if option.default is not None else option.help,
                )
    return parser


def _describe(default: Any) -> str:
    if isinstance(default, list):
        return ",".join(str(item) for item in default)
    return str(default)


def load_config_file(config_path: Path | str) -> dict[str, Any]:
    """
    Read a flat TOML option file.

    Raises:
        UsageError: If the file is missing, malformed or contains tables.
    """
    try:
        with open(config_path, "rb") as f:
            data = tomllib.load(f)
    except OSError as e:
        raise UsageError(f"cannot read config file {config_path}: {e}")
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"invalid config file {config_path}: {e}")

    values = {}
    for key, value in data.items():
        if isinstance(value, dict):
            raise UsageError(f"{config_path}: nested table [{key}] is not supported")
        values[key.replace("-", "_")] = value
    return values


def resolve_options(
    command: str,
    flags: dict[str, Any],
    file_values: dict[str, Any] | None = None,
    config_path: Path | None = None,
) -> dict[str, Any]:
    """
    Merge flag, file and default values for `command` and validate each one.

    Raises:
        UsageError: On unknown file keys, missing required options or invalid values.
    """
    options = {option.name: option for option in COMMANDS[command]["options"]}
    file_values = file_values or {}
    unknown = sorted(set(file_values) - set(options))
    if unknown:
        raise UsageError(f"{config_path or 'config'}: unknown option(s) for {command}: {', '.join(unknown)}")

    resolved = {}
    for name, option in options.items():
        if name in flags:
            raw, source = flags[name], option.flag
        elif name in file_values:
            raw, source = file_values[name], f"{config_path or 'config'}: {name}"
        else:
            if option.required:
                raise UsageError(f"missing required option {option.flag}")
            resolved[name] = option.default
            continue
        try:
            resolved[name] = option.convert(raw)
        except ValueError as e:
            raise UsageError(f"{source}: {e}")
    return resolved


def parse_cli(argv: Sequence[str] | None = None) -> CliConfig:
    """Parse the command line into a CliConfig."""
    namespace = vars(build_parser().parse_args(argv))
    command = namespace.pop("command")
    verbosity = namespace.pop("verbose")
    debug = namespace.pop("debug")
    config_path = namespace.pop("config", None)

    file_values = load_config_file(config_path) if config_path is not None else {}
    values = resolve_options(command, namespace, file_values, config_path)
    if command in ("train", "ablate") and values["lr_start"] < values["lr_end"]:
        raise UsageError("--lr-start must not be smaller than --lr-end")
    if values.get("decoder") and values["decoder"][-1] != 3:
        raise UsageError("--decoder must end with 3")
    if command == "ablate" and values["noisy"] is None and values["levels"] is None:
        raise UsageError("ablate needs --noisy, --levels or both")
    return CliConfig(command, values, config_path, verbosity, debug)
