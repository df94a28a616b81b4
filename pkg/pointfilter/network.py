"""
Patch encoder-decoder with exact reverse-mode gradients.

Shared per-point layers (linear, batch norm, ReLU) lift each patch point to
a feature vector, a channel-wise max over the patch gives the latent code,
and fully connected layers regress a displacement squashed by tanh.
"""

from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pointfilter.errors import (
    ArgumentError,
    FileError,
    FormatError,
    NumericError,
    ShapeError,
    StateError,
    WriteError,
)

FORMAT_MAGIC = "pointfilter-params"
FORMAT_VERSION = 1

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5

_BUFFERS = (".bn.running_mean", ".bn.running_var")

Gradients = dict[str, np.ndarray]


@dataclass(frozen=True)
class Architecture:
    """Channel widths of the shared encoder layers and the decoder layers."""

    encoder_widths: tuple[int, ...] = (64, 128, 256, 512, 1024)
    decoder_widths: tuple[int, ...] = (512, 256, 3)

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if not self.encoder_widths or not self.decoder_widths:
            raise ArgumentError("encoder and decoder need at least one layer each")
        if min(self.encoder_widths + self.decoder_widths) < 1:
            raise ArgumentError("layer widths must be at least 1")
        if self.decoder_widths[-1] != 3:
            raise ArgumentError("the last decoder layer must output 3 values")


@dataclass(frozen=True)
class _Layer:
    prefix: str
    fan_in: int
    fan_out: int
    normalized: bool


def _layers(arch: Architecture) -> tuple[list[_Layer], list[_Layer], _Layer]:
    encoder, width = [], 3
    for i, out in enumerate(arch.encoder_widths):
        encoder.append(_Layer(f"encoder.{i}", width, out, True))
        width = out
    decoder = []
    for j, out in enumerate(arch.decoder_widths[:-1]):
        decoder.append(_Layer(f"decoder.{j}", width, out, True))
        width = out
    head = _Layer(f"decoder.{len(arch.decoder_widths) - 1}", width, 3, False)
    return encoder, decoder, head


def parameter_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    """Name and shape of every tensor of a network, in file order."""
    encoder, decoder, head = _layers(arch)
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in [*encoder, *decoder, head]:
        shapes[f"{layer.prefix}.weight"] = (layer.fan_in, layer.fan_out)
        shapes[f"{layer.prefix}.bias"] = (layer.fan_out,)
        if layer.normalized:
            for suffix in (".bn.scale", ".bn.shift", *_BUFFERS):
                shapes[f"{layer.prefix}{suffix}"] = (layer.fan_out,)
    return shapes


def is_trainable(name: str) -> bool:
    return not name.endswith(_BUFFERS)


@dataclass
class NetworkParams:
    """
    All tensors of one network, keyed by name (e.g. `encoder.0.weight`).

    `metadata` carries the training patch settings into the parameter file.
    """

    architecture: Architecture
    tensors: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        expected = parameter_shapes(self.architecture)
        if set(expected) != set(self.tensors):
            raise StateError("tensor names do not match the architecture")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise StateError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def trainable_names(self) -> list[str]:
        return [name for name in self.tensors if is_trainable(name)]

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.architecture,
            {name: value.copy() for name, value in self.tensors.items()},
            dict(self.metadata),
        )

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            self.architecture,
            {name: value.astype(dtype) for name, value in self.tensors.items()},
            dict(self.metadata),
        )

    def with_zero_head(self) -> "NetworkParams":
        """Copy whose final linear layer is zero, so every output is (0, 0, 0)."""
        params = self.copy()
        head = _layers(self.architecture)[2]
        params.tensors[f"{head.prefix}.weight"][:] = 0
        params.tensors[f"{head.prefix}.bias"][:] = 0
        return params

    def parameter_count(self) -> int:
        return sum(self.tensors[name].size for name in self.trainable_names())


def init_params(arch: Architecture, seed: int = 0) -> NetworkParams:
    """He-normal weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(arch).items():
        if name.endswith(".weight"):
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        elif name.endswith((".bn.scale", ".bn.running_var")):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return NetworkParams(arch, tensors)


@dataclass
class _LayerCache:
    layer: _Layer
    inputs: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    activations: np.ndarray


@dataclass
class ForwardCache:
    """Activations a train-mode forward keeps for `backward`."""

    architecture: Architecture
    batch: int
    points: int
    encoder: list[_LayerCache]
    pool_argmax: np.ndarray
    decoder: list[_LayerCache]
    head_inputs: np.ndarray
    output: np.ndarray


def _batch_norm(z: np.ndarray, tensors: dict[str, np.ndarray], prefix: str, train: bool):
    scale = tensors[f"{prefix}.bn.scale"]
    shift = tensors[f"{prefix}.bn.shift"]
    running_mean = tensors[f"{prefix}.bn.running_mean"]
    running_var = tensors[f"{prefix}.bn.running_var"]

    if not train:
        inv_std = 1.0 / np.sqrt(running_var + BN_EPSILON)
        return scale * ((z - running_mean) * inv_std) + shift, None, None

    count = len(z)
    mean = z.mean(axis=0)
    var = z.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
    xhat = (z - mean) * inv_std

    unbiased = var * (count / (count - 1)) if count > 1 else var
    running_mean *= 1.0 - BN_MOMENTUM
    running_mean += BN_MOMENTUM * mean
    running_var *= 1.0 - BN_MOMENTUM
    running_var += BN_MOMENTUM * unbiased
    return scale * xhat + shift, xhat, inv_std


def _dense(h, tensors, layer: _Layer, train: bool, caches: list[_LayerCache] | None):
    z = h @ tensors[f"{layer.prefix}.weight"] + tensors[f"{layer.prefix}.bias"]
    y, xhat, inv_std = _batch_norm(z, tensors, layer.prefix, train)
    a = np.maximum(y, 0)
    if caches is not None:
        caches.append(_LayerCache(layer, h, xhat, inv_std, a))
    return a


def forward(
    params: NetworkParams,
    patch_points: np.ndarray,
    mode: str = "infer",
    patch_size: int | None = None,
) -> tuple[np.ndarray, ForwardCache | None]:
    """
    Run the network on one patch `(N, 3)` or a batch of patches `(B, N, 3)`.

    In train mode batch norm uses batch statistics, updates the running
    statistics in place and a ForwardCache is returned; in infer mode the
    running statistics are used and the cache is None. A single patch in
    train mode gives the decoder batch norm zero variance, so its output no
    longer depends on the input.

    Returns:
        Tuple of (displacements in (-1, 1), cache). Displacements are `(3,)`
        for a single patch and `(B, 3)` for a batch.

    Raises:
        ShapeError: On a wrong array shape or a row count other than `patch_size`.
        NumericError: On non-finite input.
    """
    if mode not in ("train", "infer"):
        raise ArgumentError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(patch_points, dtype=params.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != 3 or x.shape[0] == 0 or x.shape[1] == 0:
        raise ShapeError(f"expected (N, 3) or (B, N, 3) points, got shape {np.shape(patch_points)}")
    if patch_size is not None and x.shape[1] != patch_size:
        raise ShapeError(f"expected {patch_size} points per patch, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise NumericError("patch points must be finite")

    train = mode == "train"
    tensors = params.tensors
    encoder, decoder, head = _layers(params.architecture)
    batch, points = x.shape[:2]
    encoder_caches: list[_LayerCache] | None = [] if train else None
    decoder_caches: list[_LayerCache] | None = [] if train else None

    h = x.reshape(batch * points, 3)
    for layer in encoder:
        h = _dense(h, tensors, layer, train, encoder_caches)

    features = h.reshape(batch, points, -1)
    argmax = features.argmax(axis=1)
    h = np.take_along_axis(features, argmax[:, None, :], axis=1)[:, 0, :]

    for layer in decoder:
        h = _dense(h, tensors, layer, train, decoder_caches)

    output = np.tanh(h @ tensors[f"{head.prefix}.weight"] + tensors[f"{head.prefix}.bias"])
    if not np.all(np.isfinite(output)):
        raise NumericError("network produced non-finite output")

    cache = None
    if train:
        cache = ForwardCache(
            architecture=params.architecture,
            batch=batch,
            points=points,
            encoder=encoder_caches,
            pool_argmax=argmax,
            decoder=decoder_caches,
            head_inputs=h,
            output=output,
        )
    return (output[0] if single else output), cache


def _dense_backward(cache: _LayerCache, upstream: np.ndarray, tensors, grads: Gradients, need_input: bool):
    prefix = cache.layer.prefix
    dy = upstream * (cache.activations > 0)
    grads[f"{prefix}.bn.scale"] = np.sum(dy * cache.xhat, axis=0)
    grads[f"{prefix}.bn.shift"] = np.sum(dy, axis=0)

    dxhat = dy * tensors[f"{prefix}.bn.scale"]
    count = len(dy)
    dz = (cache.inv_std / count) * (
        count * dxhat - dxhat.sum(axis=0) - cache.xhat * np.sum(dxhat * cache.xhat, axis=0)
    )
    grads[f"{prefix}.weight"] = cache.inputs.T @ dz
    grads[f"{prefix}.bias"] = dz.sum(axis=0)
    return dz @ tensors[f"{prefix}.weight"].T if need_input else None


def backward(params: NetworkParams, cache: ForwardCache, loss_gradient: np.ndarray) -> Gradients:
    """
    Gradients of a loss with respect to every trainable tensor.

    Args:
        params: The parameters the cached forward pass ran with.
        cache: Cache from a train-mode `forward`.
        loss_gradient: dL/d(displacement), `(3,)` or `(B, 3)`.

    Raises:
        StateError: If the cache is missing or belongs to another architecture.
    """
    if cache is None or not isinstance(cache, ForwardCache):
        raise StateError("backward needs the cache of a train-mode forward")
    if cache.architecture != params.architecture:
        raise StateError("cache was produced by a different architecture")
    upstream = np.asarray(loss_gradient, dtype=params.dtype)
    if upstream.size != cache.batch * 3:
        raise ShapeError(f"expected a gradient for {cache.batch} displacements, got shape {upstream.shape}")
    upstream = upstream.reshape(cache.batch, 3)

    tensors = params.tensors
    head = _layers(params.architecture)[2]
    grads: Gradients = {}

    dz = upstream * (1.0 - cache.output**2)
    grads[f"{head.prefix}.weight"] = cache.head_inputs.T @ dz
    grads[f"{head.prefix}.bias"] = dz.sum(axis=0)
    dh = dz @ tensors[f"{head.prefix}.weight"].T

    for layer_cache in reversed(cache.decoder):
        dh = _dense_backward(layer_cache, dh, tensors, grads, need_input=True)

    # Max pooling routes each channel's gradient to the first maximizing point.
    unpooled = np.zeros((cache.batch, cache.points, dh.shape[1]), dtype=dh.dtype)
    np.put_along_axis(unpooled, cache.pool_argmax[:, None, :], dh[:, None, :], axis=1)
    dh = unpooled.reshape(cache.batch * cache.points, -1)

    for position, layer_cache in reversed(list(enumerate(cache.encoder))):
        dh = _dense_backward(layer_cache, dh, tensors, grads, need_input=position > 0)
    return grads


def sgd_step(params: NetworkParams, grads: Mapping[str, np.ndarray], lr: float) -> NetworkParams:
    """Plain gradient descent; running batch-norm statistics are carried over unchanged."""
    trainable = set(params.trainable_names())
    if set(grads) != trainable:
        raise StateError("gradients do not cover exactly the trainable tensors")
    updated = params.copy()
    for name in trainable:
        grad = np.asarray(grads[name])
        if grad.shape != params.tensors[name].shape:
            raise StateError(f"gradient for {name} has shape {grad.shape}, expected {params.tensors[name].shape}")
        updated.tensors[name] = params.tensors[name] - lr * grad
    return updated


def save_params(params: NetworkParams, path: Path | str) -> None:
    """
    Write parameters as versioned text.

    Header lines give the magic and version, the architecture and metadata;
    each tensor follows as `block <name> <shape...>` and its row-major rows.
    """
    try:
        with open(path, "w") as f:
            f.write(f"{FORMAT_MAGIC} {FORMAT_VERSION}\n")
            f.write("encoder " + " ".join(map(str, params.architecture.encoder_widths)) + "\n")
            f.write("decoder " + " ".join(map(str, params.architecture.decoder_widths)) + "\n")
            for key, value in sorted(params.metadata.items()):
                f.write(f"meta {key} {value}\n")
            for name, shape in parameter_shapes(params.architecture).items():
                f.write(f"block {name} " + " ".join(map(str, shape)) + "\n")
                rows = params.tensors[name].reshape(-1, shape[-1]).astype(np.float64)
                np.savetxt(f, rows, fmt="%.17g")
            f.write("end\n")
    except OSError as e:
        raise WriteError(f"cannot write {path}: {e}")


def load_params(path: Path | str) -> NetworkParams:
    """
    Read a parameter file written by `save_params`.

    Raises:
        FileError: If the file cannot be read.
        FormatError: On a version mismatch, truncation or inconsistent shapes.
    """
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise FileError(f"no such model file: {path}")
    except OSError as e:
        raise FileError(f"cannot read {path}: {e}")

    cursor = 0

    def next_line() -> list[str]:
        nonlocal cursor
        if cursor >= len(lines):
            raise FormatError(f"{path}: truncated after line {cursor}")
        cursor += 1
        return lines[cursor - 1].split()

    header = next_line()
    if len(header) != 2 or header[0] != FORMAT_MAGIC:
        raise FormatError(f"{path}: not a pointfilter parameter file")
    if header[1] != str(FORMAT_VERSION):
        raise FormatError(f"{path}: unsupported format version {header[1]}")

    try:
        encoder_line, decoder_line = next_line(), next_line()
        if encoder_line[:1] != ["encoder"] or decoder_line[:1] != ["decoder"]:
            raise FormatError(f"{path}: missing architecture header")
        arch = Architecture(
            tuple(int(w) for w in encoder_line[1:]),
            tuple(int(w) for w in decoder_line[1:]),
        )
    except (ValueError, ArgumentError) as e:
        raise FormatError(f"{path}: bad architecture header: {e}")

    metadata: dict[str, str] = {}
    tokens = next_line()
    while tokens[:1] == ["meta"]:
        if len(tokens) != 3:
            raise FormatError(f"{path}:{cursor}: bad metadata line")
        metadata[tokens[1]] = tokens[2]
        tokens = next_line()

    expected = parameter_shapes(arch)
    tensors: dict[str, np.ndarray] = {}
    while tokens != ["end"]:
        if tokens[:1] != ["block"] or len(tokens) < 3:
            raise FormatError(f"{path}:{cursor}: expected a block header")
        name = tokens[1]
        try:
            shape = tuple(int(s) for s in tokens[2:])
        except ValueError:
            raise FormatError(f"{path}:{cursor}: bad block shape")
        if name not in expected:
            raise FormatError(f"{path}:{cursor}: unexpected block {name}")
        if shape != expected[name]:
            raise FormatError(f"{path}:{cursor}: block {name} has shape {shape}, architecture needs {expected[name]}")
        row_count = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        rows = []
        for _ in range(row_count):
            row_tokens = next_line()
            if len(row_tokens) != shape[-1]:
                raise FormatError(f"{path}:{cursor}: expected {shape[-1]} values")
            try:
                rows.append([float(t) for t in row_tokens])
            except ValueError:
                raise FormatError(f"{path}:{cursor}: non-numeric value")
        tensors[name] = np.array(rows, dtype=np.float64).reshape(shape)
        tokens = next_line()

    missing = set(expected) - set(tensors)
    if missing:
        raise FormatError(f"{path}: missing blocks {', '.join(sorted(missing))}")
    if any(np.any(tensors[name] < 0) for name in tensors if name.endswith(".bn.running_var")):
        raise FormatError(f"{path}: negative running variance")
    return NetworkParams(arch, tensors, metadata)
