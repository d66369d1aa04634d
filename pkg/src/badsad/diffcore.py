"""Minimal reverse-mode differentiation over numpy arrays.

Operations executed inside a ``with Tape():`` block are recorded; calling
:func:`backward` on a scalar result replays the record in reverse and
accumulates gradients into every leaf tensor that requires them.  Outside
a tape nothing is recorded, which is how inference runs.

Only the operator set needed by the autoencoders in :mod:`badsad.model`
and the objectives in :mod:`badsad.losses` is provided.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, NumericalError, UsageError

DEFAULT_EPS_COS = 1e-8

_local = threading.local()


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return dense(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor with a persistent gradient buffer."""

    def __init__(self, value, name: str = "", dtype=None):
        super().__init__(value, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest per thread.  With ``debug=True``
    every recorded output is checked for NaN/Inf.
    """

    debug: bool = False
    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise UsageError("cannot record onto a tape that has already been replayed")
        if self.debug:
            check_finite(node.output, node.op)
        node.output._tape = self
        node.output._index = len(self.nodes)
        self.nodes.append(node)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def check_finite(t: Tensor | np.ndarray, where: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {where}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce two operands, casting bare scalars to the tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _emit(data: np.ndarray, inputs: tuple, backward_fn, op: str) -> Tensor:
    tape = current_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape.record(_Node(inputs, out, backward_fn, op))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(a.data / b.data, (a, b), bw, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = np.asarray(exponent, dtype=x.dtype)

    def bw(g):
        return (g * p * x.data ** (p - 1),)

    return _emit(x.data**p, (x,), bw, "power")


def leaky_relu(x: Tensor, slope: float = 0.0) -> Tensor:
    """max(x, slope*x) for 0 <= slope < 1; the derivative at exactly 0 is ``slope``."""
    if not 0.0 <= slope < 1.0:
        raise ConfigurationError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    x = as_tensor(x)
    s = np.asarray(slope, dtype=x.dtype)
    positive = x.data > 0
    out = np.where(positive, x.data, s * x.data)

    def bw(g):
        return (np.where(positive, g, s * g),)

    return _emit(out, (x,), bw, "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (np.where(inside, g, 0.0).astype(g.dtype),)

    return _emit(np.clip(x.data, lo, hi), (x,), bw, "clamp")


# -- reductions and shape ops ----------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.asarray(out), (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise UsageError("mean over an empty axis")
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _emit(out, (x,), bw, "reshape")


def take(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(out), (x,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -- layers -----------------------------------------------------------------


def dense(x: Tensor, weight: Tensor) -> Tensor:
    """Bias-free matrix product ``x @ weight`` for x:[N,F], weight:[F,D]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"dense expects 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"dense: input axis 1 has extent {x.shape[1]} but weight axis 0 has {weight.shape[0]}"
        )

    def bw(g):
        return g @ weight.data.T, x.data.T @ g

    return _emit(x.data @ weight.data, (x, weight), bw, "dense")


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise DimensionError(f"kernel extent {kernel} exceeds padded input extent {size + 2 * padding}")
    if span % stride:
        raise ConfigurationError(
            f"output extent ({size} + 2*{padding} - {kernel})/{stride} + 1 is not an integer"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding) -> np.ndarray:
    ph, pw = padding if isinstance(padding, tuple) else (padding, padding)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation, x:[N,Cin,H,W], kernel:[Cout,Cin,kH,kW]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"padding must be >= 0, got {padding}")
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D [N,C,H,W], got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-D [Cout,Cin,kH,kW], got shape {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel axis (1): input has {cin}, kernel expects {kcin}")
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)

    cols = _im2col(x.data, kh, kw, stride, padding)  # [N*Ho*Wo, Cin*kH*kW]
    kmat = kernel.data.reshape(cout, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gmat.T @ cols).reshape(kernel.shape)
        # input gradient: full correlation of the (dilated) output gradient with the flipped kernel
        if stride > 1:
            gd = np.zeros((n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
            gd[:, :, ::stride, ::stride] = g
        else:
            gd = g
        flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gcols = _im2col(gd, kh, kw, 1, (kh - 1, kw - 1))
        gxp = (gcols @ flipped.reshape(cin, -1).T).reshape(n, h + 2 * padding, w + 2 * padding, cin)
        gxp = gxp.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        return np.ascontiguousarray(gx), gk

    return _emit(out, (x, kernel), bw, "conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; ties route the gradient to the lowest flat index in the window."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ConfigurationError(f"maxpool window and stride must be >= 1, got {window}, {stride}")
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d input must be 4-D [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    for axis, size in ((2, h), (3, w)):
        if size < window or (size - window) % stride:
            raise ConfigurationError(
                f"maxpool2d: axis {axis} extent {size} is not exactly tiled by window {window}, stride {stride}"
            )
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    windows = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        h_end, w_end = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for p in range(window * window):
            i, j = divmod(p, window)
            gx[:, :, i : i + h_end : stride, j : j + w_end : stride] += np.where(arg == p, g, 0.0)
        return (gx,)

    return _emit(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample2d input must be 4-D, got shape {x.shape}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _emit(out, (x,), bw, "upsample2d")


# -- geometry ---------------------------------------------------------------


def squared_l2_distance(a, b) -> Tensor:
    """Sum over the last axis of (a - b)**2; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.shape[-1:] != b.shape[-1:]:
        raise DimensionError(f"squared_l2_distance: last axes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.einsum("...i,...i->...", diff, diff)

    def bw(g):
        gd = 2.0 * diff * np.asarray(g)[..., None]
        return _unbroadcast(gd, a.shape), _unbroadcast(-gd, b.shape)

    return _emit(np.asarray(out), (a, b), bw, "squared_l2_distance")


def cosine_similarity(a, b, eps: float = DEFAULT_EPS_COS) -> Tensor:
    """a.b / (max(|a|, eps) * max(|b|, eps)) over the last axis, clamped to [-1, 1].

    Leading axes broadcast, so row-wise and all-pairs forms both work.
    """
    if eps <= 0:
        raise ConfigurationError(f"eps must be positive, got {eps}")
    a, b = _pair(a, b)
    if a.shape[-1:] != b.shape[-1:]:
        raise DimensionError(f"cosine_similarity: last axes differ, {a.shape} vs {b.shape}")
    na = np.sqrt(np.einsum("...i,...i->...", a.data, a.data))[..., None]
    nb = np.sqrt(np.einsum("...i,...i->...", b.data, b.data))[..., None]
    fa, fb = np.maximum(na, eps), np.maximum(nb, eps)
    dot = np.einsum("...i,...i->...", *np.broadcast_arrays(a.data, b.data))[..., None]
    raw = dot / (fa * fb)
    out = np.clip(raw, -1.0, 1.0)[..., 0]

    def bw(g):
        g = np.asarray(g)[..., None]
        # the floor is constant below eps, so the norm term only flows above it
        ga = b.data / (fa * fb) - np.where(na > eps, raw * a.data / (fa * fa), 0.0)
        gb = a.data / (fa * fb) - np.where(nb > eps, raw * b.data / (fb * fb), 0.0)
        return _unbroadcast(g * ga, a.shape), _unbroadcast(g * gb, b.shape)

    return _emit(np.asarray(out, dtype=a.dtype), (a, b), bw, "cosine_similarity")


def cosine_similarity_raw(a: np.ndarray, b: np.ndarray, eps: float = DEFAULT_EPS_COS) -> np.ndarray:
    """Unclamped cosine on plain arrays; used by diagnostics and tests."""
    na = max(float(np.linalg.norm(a)), eps)
    nb = max(float(np.linalg.norm(b)), eps)
    return np.dot(a, b) / (na * nb)


# -- reverse pass ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor):
        raise UsageError("backward() needs a Tensor produced under a Tape")
    if loss.data.size != 1 or loss.ndim > 1:
        raise UsageError(f"backward() needs a scalar root, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise UsageError("loss was not produced by taped operations (record it inside `with Tape():`)")
    if tape.consumed:
        raise UsageError("stale tape: backward() already ran; re-execute the forward pass first")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss._index + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._tape is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# -- optimisation -------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")


def adam_step(params: Iterable[Parameter], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, then decoupled decay, then zero the grads."""
    if not state.lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {state.lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in params:
        key = p.name or id(p)
        g = p.grad
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m = state.m[key] = b1 * state.m[key] + (1.0 - b1) * g
        v = state.v[key] = b2 * state.v[key] + (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        value = p.data - step.astype(p.dtype, copy=False)
        if state.weight_decay:
            value = value * p.dtype.type(1.0 - state.lr * state.weight_decay)
        p.data = value.astype(p.dtype, copy=False)
        p.zero_grad()
    return state


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
