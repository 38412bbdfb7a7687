"""
Dense tensors with a reverse-mode tape.

Only the operations the miniature U-Net needs are provided. Ops record themselves on
the tape that is active in the current thread (see ``Tape``); with no active tape they
are plain forward computations. Ops never mutate their inputs and preserve the float
dtype of their inputs (float32 in training, float64 in gradient checks).
"""
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigurationError, DataError, DegenerateBatchError, NumericError, UsageError

PROB_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    """A dense float array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(frozen=True)
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class Tape:
    """Ordered record of differentiable ops.

    Used as a context manager; while entered it is the active tape of the current
    thread. Nodes are appended in execution order, so inputs always precede the
    node that consumes them.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


def _stack() -> List[Optional[Tape]]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording in the current thread."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Backward) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"{op} produced non-finite values")
    needs_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad)
    tape = active_tape()
    if tape is not None and needs_grad:
        tape.record(Node(op, tuple(inputs), result, backward))
    return result


def backward(loss: Tensor, tape: Tape) -> Dict[int, np.ndarray]:
    """Gradients of ``loss`` keyed by tensor id, for every recorded tensor it depends on."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output.id)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
    return grads


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero padding that preserves H and W."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ConfigurationError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if wcin != cin:
        raise ConfigurationError(f"conv2d weight expects {wcin} input channels, input has {cin}")
    if bias.shape != (cout,):
        raise ConfigurationError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")

    pad = kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, h, w, cout).transpose(0, 3, 1, 2) + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def _backward(g: np.ndarray):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = (gmat @ wmat).reshape(n, h, w, cin, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + h, j:j + w] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    return _emit("conv2d", (x, weight, bias), out, _backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_stats: Tuple[np.ndarray, np.ndarray],
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tuple[Tensor, Tuple[np.ndarray, np.ndarray]]:
    """Per-channel normalization over (N, H, W).

    Returns the output and the (possibly updated) running statistics. Train mode uses
    batch statistics and returns new running stats by exponential moving average;
    eval mode uses the running stats and returns them unchanged.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"batch_norm expects rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    running_mean, running_var = running_stats
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ConfigurationError(f"batch_norm parameters do not match {c} channels")
    if eps <= 0:
        raise ConfigurationError("batch_norm eps must be positive", field="eps")
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown batch_norm mode {mode!r}", field="mode")

    axes = (0, 2, 3)
    dtype = x.dtype
    count = n * h * w
    if mode == "train":
        if count < 2:
            raise DegenerateBatchError(f"batch_norm over a single element per channel (input {x.shape})")
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        new_mean = ((1.0 - momentum) * running_mean + momentum * mean).astype(running_mean.dtype)
        new_var = ((1.0 - momentum) * running_var + momentum * var * count / (count - 1)).astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        new_mean, new_var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mean.astype(dtype).reshape(1, c, 1, 1)) * inv_std
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def _backward(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g4
        if mode == "eval":
            return dxhat * inv_std, dgamma, dbeta
        sum_d = dxhat.sum(axis=axes, keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = inv_std * (dxhat - sum_d / count - xhat * sum_dx / count)
        return dx, dgamma, dbeta

    return _emit("batch_norm", (x, gamma, beta), out, _backward), (new_mean, new_var)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def _backward(g: np.ndarray):
        return (g * (x.data > 0),)

    return _emit("relu", (x,), out, _backward)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; gradient goes to the first maximum in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"max_pool2 needs even spatial size, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def _backward(g: np.ndarray):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, idx, g[..., None], axis=-1)
        return (gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _emit("max_pool2", (x,), out, _backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _backward(g: np.ndarray):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit("upsample_nearest2", (x,), out, _backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ConfigurationError("concat_channels expects rank-4 tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ConfigurationError(f"concat_channels needs equal N, H, W; got {a.shape} and {b.shape}")
    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def _backward(g: np.ndarray):
        return g[:, :split], g[:, split:]

    return _emit("concat_channels", (a, b), out, _backward)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def _backward(g: np.ndarray):
        return (g * out * (1 - out),)

    return _emit("sigmoid", (x,), out, _backward)


def pixel_bce(prob: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-pixel binary cross-entropy in float64, probabilities clamped away from 0 and 1."""
    p = np.clip(prob.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = target.astype(np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce_loss(prob_map: Tensor, target_mask: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean pixel-wise binary cross-entropy as a scalar tensor."""
    target = target_mask.data if isinstance(target_mask, Tensor) else np.asarray(target_mask)
    if target.shape != prob_map.shape:
        raise ConfigurationError(f"bce_loss shapes differ: {prob_map.shape} vs {target.shape}")
    if not np.isin(target, (0, 1)).all():
        raise DataError("bce_loss target values must be 0 or 1")
    dtype = prob_map.dtype
    loss = np.asarray(pixel_bce(prob_map.data, target).mean(), dtype=dtype)

    def _backward(g: np.ndarray):
        p = prob_map.data.astype(np.float64)
        inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
        pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
        y = target.astype(np.float64)
        grad = (-(y / pc) + (1.0 - y) / (1.0 - pc)) * inside / p.size
        return ((float(g) * grad).astype(dtype),)

    return _emit("bce_loss", (prob_map,), loss, _backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def _backward(g: np.ndarray):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _emit("sum_all", (x,), out, _backward)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data * x.dtype.type(c)

    def _backward(g: np.ndarray):
        return (g * x.dtype.type(c),)

    return _emit("mul_scalar", (x,), out, _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    out = a.data + b.data

    def _backward(g: np.ndarray):
        return g, g

    return _emit("add", (a, b), out, _backward)
