"""Bias-free convolutional autoencoders, reconstruction pretraining, hypersphere centers,
and the binary checkpoint format."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError, DimensionError, FormatError, TrainingError, UsageError

logger = logging.getLogger(__name__)

LRELU_SLOPE = 0.1
DEFAULT_ZERO_GUARD = 0.1
INFER_CHUNK = 256

CKPT_MAGIC = b"BSADCKPT"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


# -- architectures -----------------------------------------------------------


def _conv_stack(prefix: str, channels: list[int]) -> list[tuple]:
    layers = []
    for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
        layers += [("conv", f"{prefix}.conv{i + 1}", cout, cin, 5, 2), ("lrelu",), ("pool", 2)]
    return layers


def _conv_decoder(channels: list[int], spatial: int, rep_dim: int) -> list[tuple]:
    """Mirror of the conv encoder: dense -> reshape -> (upsample, conv)* with no bias."""
    top = channels[-1]
    layers = [("dense", "dec.fc", rep_dim, top * spatial * spatial), ("reshape", (top, spatial, spatial)), ("lrelu",)]
    rev = channels[::-1]
    for i, (cin, cout) in enumerate(zip(rev[:-1], rev[1:])):
        layers += [("upsample", 2), ("conv", f"dec.deconv{i + 1}", cout, cin, 5, 2)]
        if i < len(rev) - 2:
            layers.append(("lrelu",))
    return layers


@dataclass(frozen=True)
class Architecture:
    tag: str
    input_shape: tuple[int, ...]
    rep_dim: int
    encoder: tuple
    decoder: tuple

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.encoder + self.decoder:
            if layer[0] == "conv":
                _, name, cout, cin, k, _pad = layer
                shapes[name] = (cout, cin, k, k)
            elif layer[0] == "dense":
                _, name, fin, fout = layer
                shapes[name] = (fin, fout)
        return shapes


def mnist_arch() -> Architecture:
    ch = [1, 8, 4]
    enc = _conv_stack("enc", ch) + [("flatten",), ("dense", "enc.fc", 4 * 7 * 7, 32)]
    return Architecture("mnist", (1, 28, 28), 32, tuple(enc), tuple(_conv_decoder(ch, 7, 32)))


def cifar_arch() -> Architecture:
    ch = [3, 32, 64, 128]
    enc = _conv_stack("enc", ch) + [("flatten",), ("dense", "enc.fc", 128 * 4 * 4, 128)]
    return Architecture("cifar10", (3, 32, 32), 128, tuple(enc), tuple(_conv_decoder(ch, 4, 128)))


def dense_arch(in_dim: int, hidden: int = 24, rep_dim: int = 16) -> Architecture:
    enc = (("dense", "enc.fc1", in_dim, hidden), ("lrelu",), ("dense", "enc.fc2", hidden, rep_dim))
    dec = (("dense", "dec.fc1", rep_dim, hidden), ("lrelu",), ("dense", "dec.fc2", hidden, in_dim))
    return Architecture(f"dense-{in_dim}-{hidden}-{rep_dim}", (in_dim,), rep_dim, enc, dec)


def arch_from_tag(tag: str) -> Architecture:
    if tag in ("mnist", "fashion"):
        return mnist_arch()
    if tag == "cifar10":
        return cifar_arch()
    if tag.startswith("dense-"):
        try:
            in_dim, hidden, rep = (int(p) for p in tag.split("-")[1:])
        except ValueError:
            raise ConfigurationError(f"malformed dense architecture tag {tag!r}") from None
        return dense_arch(in_dim, hidden, rep)
    raise ConfigurationError(f"unknown architecture tag {tag!r}")


def arch_for_sample(dataset: str, sample_shape: tuple[int, ...], hidden: int = 24, rep_dim: int = 16) -> Architecture:
    if dataset in ("mnist", "fashion"):
        return mnist_arch()
    if dataset == "cifar10":
        return cifar_arch()
    return dense_arch(int(np.prod(sample_shape)), hidden, rep_dim)


def trace_shapes(layers, input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-layer output shapes (without the batch axis); raises on inconsistency."""
    shape = tuple(input_shape)
    out = []
    for layer in layers:
        kind = layer[0]
        if kind == "conv":
            _, name, cout, cin, k, pad = layer
            if shape[0] != cin:
                raise DimensionError(f"{name}: expects {cin} channels, receives {shape[0]}")
            shape = (cout, shape[1] + 2 * pad - k + 1, shape[2] + 2 * pad - k + 1)
        elif kind == "pool":
            shape = (shape[0], shape[1] // layer[1], shape[2] // layer[1])
        elif kind == "upsample":
            shape = (shape[0], shape[1] * layer[1], shape[2] * layer[1])
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            _, name, fin, fout = layer
            if shape != (fin,):
                raise DimensionError(f"{name}: expects {fin} features, receives {shape}")
            shape = (fout,)
        elif kind == "reshape":
            if int(np.prod(layer[1])) != int(np.prod(shape)):
                raise DimensionError(f"reshape {shape} -> {layer[1]} changes the element count")
            shape = tuple(layer[1])
        out.append(shape)
    return out


# -- state ----------------------------------------------------------------------


@dataclass
class ModelState:
    arch: Architecture
    params: dict[str, dc.Parameter]
    dtype: np.dtype = np.dtype(np.float32)
    history: list[float] = field(default_factory=list)

    @property
    def rep_dim(self) -> int:
        return self.arch.rep_dim

    def encoder_params(self) -> list[dc.Parameter]:
        return [p for n, p in self.params.items() if n.startswith("enc.")]

    def decoder_params(self) -> list[dc.Parameter]:
        return [p for n, p in self.params.items() if n.startswith("dec.")]

    def copy(self, dtype=None) -> "ModelState":
        dtype = np.dtype(dtype or self.dtype)
        params = {n: dc.Parameter(p.data.astype(dtype, copy=True), name=n) for n, p in self.params.items()}
        return ModelState(self.arch, params, dtype, list(self.history))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}


def init_model(arch: Architecture, seed: int = 0, dtype=np.float32) -> ModelState:
    """He-normal initialisation, drawn in a fixed parameter order from ``seed``."""
    trace_shapes(arch.encoder, arch.input_shape)
    trace_shapes(arch.decoder, (arch.rep_dim,))
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = dc.Parameter(w.astype(dtype), name=name)
    return ModelState(arch, params, np.dtype(dtype))


def run_layers(layers, params: dict[str, dc.Parameter], x):
    for layer in layers:
        kind = layer[0]
        if kind == "conv":
            x = dc.conv2d(x, params[layer[1]], stride=1, padding=layer[5])
        elif kind == "lrelu":
            x = dc.leaky_relu(x, LRELU_SLOPE)
        elif kind == "pool":
            x = dc.maxpool2d(x, layer[1], layer[1])
        elif kind == "upsample":
            x = dc.upsample2d(x, layer[1])
        elif kind == "flatten":
            x = dc.reshape(x, (x.shape[0], -1))
        elif kind == "reshape":
            x = dc.reshape(x, (x.shape[0],) + tuple(layer[1]))
        elif kind == "dense":
            x = dc.dense(x, params[layer[1]])
        else:
            raise ConfigurationError(f"unknown layer kind {kind!r}")
    return x


def _check_batch(state: ModelState, batch_shape: tuple[int, ...]) -> None:
    if tuple(batch_shape[1:]) != state.arch.input_shape:
        raise DimensionError(
            f"batch of shape {tuple(batch_shape)} does not match {state.arch.tag} input {state.arch.input_shape}"
        )


def forward_encoder(state: ModelState, batch) -> dc.Tensor:
    """Differentiable encoder pass (records onto the active tape)."""
    t = batch if isinstance(batch, dc.Tensor) else dc.Tensor(np.asarray(batch, dtype=state.dtype))
    _check_batch(state, t.shape)
    return run_layers(state.arch.encoder, state.params, t)


def encode(state: ModelState, batch: np.ndarray) -> np.ndarray:
    """phi(X; theta) for every row, computed without a tape in fixed-size chunks.

    A row's latent is bitwise the same whether it is encoded alone or in a batch.
    """
    batch = np.asarray(batch, dtype=state.dtype)
    _check_batch(state, batch.shape)
    if len(batch) == 0:
        return np.zeros((0, state.rep_dim), state.dtype)
    out = []
    for start in range(0, len(batch), INFER_CHUNK):
        chunk = batch[start : start + INFER_CHUNK]
        k = len(chunk)
        # pad to a fixed row count: BLAS results then do not depend on how many rows share the call
        if k < INFER_CHUNK:
            chunk = np.concatenate([chunk, np.zeros((INFER_CHUNK - k,) + chunk.shape[1:], chunk.dtype)])
        out.append(_untaped(run_layers, state.arch.encoder, state.params, dc.Tensor(chunk)).data[:k])
    return np.concatenate(out)


def _untaped(fn, *args):
    """Run ``fn`` with recording suspended on this thread."""
    stack = dc._tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        return fn(*args)
    finally:
        stack.extend(saved)


def reconstruct(state: ModelState, batch: np.ndarray) -> np.ndarray:
    """Decoder output clamped to [0, 1]."""
    batch = np.asarray(batch, dtype=state.dtype)
    _check_batch(state, batch.shape)
    z = dc.Tensor(encode(state, batch))
    raw = _untaped(run_layers, state.arch.decoder, state.params, z).data
    return np.clip(raw, 0.0, 1.0)


# -- pretraining ------------------------------------------------------------------


def pretrain_autoencoder(
    data: np.ndarray,
    arch: Architecture,
    epochs: int = 30,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    weight_decay: float = 1e-6,
    dtype=np.float32,
    log=None,
) -> ModelState:
    """Minimise mean squared reconstruction error; ``state.history`` holds per-epoch MSE.

    The loss is taken on the raw decoder output; the [0, 1] clamp is applied
    only by :func:`reconstruct` so that saturated pixels keep a gradient.
    """
    if len(data) == 0:
        raise UsageError("pretraining needs at least one sample")
    state = init_model(arch, seed, dtype)
    data = np.asarray(data, dtype=dtype)
    _check_batch(state, data.shape)
    opt = dc.AdamState(lr=lr, weight_decay=weight_decay)
    params = list(state.params.values())
    for epoch in range(epochs):
        order = np.random.default_rng([seed, 1, epoch]).permutation(len(data))
        total, seen = 0.0, 0
        for start in range(0, len(data), batch_size):
            x = data[order[start : start + batch_size]]
            with dc.Tape():
                xt = dc.Tensor(x)
                z = run_layers(arch.encoder, state.params, xt)
                recon = run_layers(arch.decoder, state.params, z)
                loss = ((recon - xt) ** 2).mean()
                if not np.isfinite(loss.data):
                    raise TrainingError(f"reconstruction loss diverged (NaN/Inf) in pretraining epoch {epoch}")
                dc.backward(loss)
            dc.adam_step(params, opt)
            total += float(loss.data) * len(x)
            seen += len(x)
        state.history.append(total / seen)
        logger.info("pretrain epoch %d mse %.6f", epoch, state.history[-1])
        if log is not None:
            log(epoch, state.history[-1])
    return state


# -- centers ----------------------------------------------------------------------


@dataclass(frozen=True)
class Centers:
    c: np.ndarray
    c_p: np.ndarray
    c_a: np.ndarray
    zero_guard: float = DEFAULT_ZERO_GUARD

    def __post_init__(self):
        for arr in (self.c, self.c_p, self.c_a):
            arr.setflags(write=False)

    def tobytes(self) -> bytes:
        return self.c.tobytes() + self.c_p.tobytes() + self.c_a.tobytes()


def guard_center(center: np.ndarray, zero_guard: float) -> np.ndarray:
    """Replace coordinates with |c_i| < zero_guard by sign(c_i) * zero_guard, sign(0) = +1."""
    center = np.array(center, copy=True)
    small = np.abs(center) < zero_guard
    sign = np.where(center < 0, -1.0, 1.0)
    center[small] = (sign * zero_guard)[small]
    return center


def compute_center(state: ModelState, images: np.ndarray, zero_guard: float = DEFAULT_ZERO_GUARD) -> np.ndarray:
    if len(images) == 0:
        raise UsageError("cannot compute a center from an empty image set")
    z = encode(state, images).astype(np.float64)
    # mean taken as offsets from the first row, so identical rows give that row exactly
    mean = z[0] + (z - z[0]).mean(axis=0)
    return guard_center(mean, zero_guard).astype(state.dtype)


def compute_attack_centers(
    state: ModelState, poisoned: np.ndarray, labeled_abnormal: np.ndarray, zero_guard: float = DEFAULT_ZERO_GUARD
) -> tuple[np.ndarray, np.ndarray]:
    if poisoned is None or len(poisoned) == 0:
        raise UsageError("poisoned set is empty; c_p is undefined")
    if len(labeled_abnormal) == 0:
        raise UsageError("labeled-abnormal set is empty; c_a is undefined")
    return compute_center(state, poisoned, zero_guard), compute_center(state, labeled_abnormal, zero_guard)


# -- checkpoints ------------------------------------------------------------------


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray, dtype: np.dtype) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes())


def checkpoint_bytes(state: ModelState, centers: Centers | None = None, include_decoder: bool = True) -> bytes:
    tensors = {n: p.data for n, p in state.params.items() if include_decoder or n.startswith("enc.")}
    if centers is not None:
        tensors.update({"center.c": centers.c, "center.c_p": centers.c_p, "center.c_a": centers.c_a})
    buf = io.BytesIO()
    tag = state.arch.tag.encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IH", CKPT_VERSION, len(tag)))
    buf.write(tag)
    buf.write(struct.pack("<BII", _DTYPE_CODES[state.dtype], state.rep_dim, len(tensors)))
    # the guard is kept as a double so it survives a float32 checkpoint unchanged
    buf.write(struct.pack("<d", centers.zero_guard if centers is not None else float("nan")))
    for name, arr in tensors.items():
        _write_tensor(buf, name, arr, state.dtype)
    return buf.getvalue()


def save_checkpoint(path: str | Path, state: ModelState, centers: Centers | None = None, include_decoder: bool = True) -> None:
    Path(path).write_bytes(checkpoint_bytes(state, centers, include_decoder))


def load_checkpoint(path: str | Path) -> tuple[ModelState, Centers | None]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes(), str(path))


def parse_checkpoint(data: bytes, where: str = "checkpoint") -> tuple[ModelState, Centers | None]:
    buf = io.BytesIO(data)

    def read(n):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise FormatError(f"{where}: truncated")
        return chunk

    if read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError(f"{where}: not a checkpoint file (bad magic)")
    version, tag_len = struct.unpack("<IH", read(6))
    if version != CKPT_VERSION:
        raise FormatError(f"{where}: unsupported checkpoint version {version}")
    tag = read(tag_len).decode("utf-8")
    code, rep_dim, count = struct.unpack("<BII", read(9))
    (zero_guard,) = struct.unpack("<d", read(8))
    if code not in _CODE_DTYPES:
        raise FormatError(f"{where}: unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", read(2))
        name = read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{rank}I", read(4 * rank))
        size = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(read(size), dtype=dtype.newbyteorder("<")).reshape(shape).astype(dtype)
    arch = arch_from_tag(tag)
    if arch.rep_dim != rep_dim:
        raise FormatError(f"{where}: header rep_dim {rep_dim} disagrees with arch {tag}")
    params = {}
    for name, shape in arch.param_shapes().items():
        if name not in tensors:
            if name.startswith("dec."):
                continue
            raise FormatError(f"{where}: missing tensor {name}")
        if tensors[name].shape != shape:
            raise FormatError(f"{where}: tensor {name} has shape {tensors[name].shape}, arch expects {shape}")
        params[name] = dc.Parameter(tensors[name].copy(), name=name)
    centers = None
    if "center.c" in tensors:
        centers = Centers(
            tensors["center.c"].copy(),
            tensors["center.c_p"].copy(),
            tensors["center.c_a"].copy(),
            zero_guard,
        )
    return ModelState(arch, params, dtype), centers
