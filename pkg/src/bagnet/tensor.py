"""Rank-4 tensors, a reverse-mode tape, and the operator set the network uses.

Every operator takes and returns :class:`Tensor` objects in (n, c, h, w)
layout. When a :class:`Tape` is active (``with Tape() as tape:``) and any
input requires a gradient, the operator appends a node holding a
vector-Jacobian closure; ``tape.backward(loss)`` replays those closures in
reverse.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError, TapeUsageError

TRAIN = "train"
INFER = "infer"
_MODES = (TRAIN, INFER)


class Tensor:
    """Dense (n, c, h, w) real array that can take part in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4 (n, c, h, w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all tensor dimensions must be >= 1, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


@dataclass
class ConvParams:
    """Weights of one convolution, optionally followed by batch normalisation.

    Learnable entries are rank-4 tensors: ``weight`` is (c_out, c_in, k, k),
    ``bias``/``bn_gamma``/``bn_beta`` are (1, c_out, 1, 1). Running statistics
    are plain arrays of length c_out and are never touched by the optimiser.
    """

    weight: Tensor
    bias: Tensor
    bn_gamma: Optional[Tensor] = None
    bn_beta: Optional[Tensor] = None
    bn_running_mean: Optional[np.ndarray] = None
    bn_running_var: Optional[np.ndarray] = None
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        co, _, k, k2 = self.weight.shape
        if k != k2 or k not in (1, 3):
            raise ConfigurationError(f"kernel must be 1x1 or 3x3, got {k}x{k2}")
        if self.bias.shape != (1, co, 1, 1):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={co}")
        if self.has_bn:
            if self.bn_eps <= 0:
                raise ConfigurationError("bn_eps must be positive")
            if not 0.0 <= self.bn_momentum <= 1.0:
                raise ConfigurationError("bn_momentum must lie in [0, 1]")
            if np.any(self.bn_running_var < 0):
                raise ConfigurationError("bn_running_var must be nonnegative")

    @property
    def has_bn(self) -> bool:
        return self.bn_gamma is not None

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def learnable(self) -> list:
        out = [self.weight, self.bias]
        if self.has_bn:
            out += [self.bn_gamma, self.bn_beta]
        return out


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out, inputs, vjp, op):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class Tape:
    """Ordered record of executed operators.

    Used as a context manager; operators executed inside the ``with`` block
    are recorded when at least one input requires a gradient.
    """

    def __init__(self):
        self._nodes: list = []
        self._produced: dict = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def ops(self) -> list:
        return [node.op for node in self._nodes]

    @property
    def nodes(self) -> list:
        """Recorded nodes in execution order; each has ``op``, ``inputs`` and ``out``."""
        return list(self._nodes)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        """Append a node. ``vjp(grad_out)`` returns one gradient (or None) per input."""
        self._nodes.append(_Node(out, tuple(inputs), vjp, op))
        self._produced[id(out)] = out

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every requires-grad tensor this tape touched.

        Gradients from fan-out are summed. Each call recomputes gradients from
        scratch, so replaying the same tape twice yields identical results.
        """
        if loss.shape != (1, 1, 1, 1):
            raise TapeUsageError(f"backward needs a scalar (1,1,1,1) loss, got shape {loss.shape}")
        if id(loss) not in self._produced or self._produced[id(loss)] is not loss:
            raise TapeUsageError("loss tensor was not produced by an operation on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        touched = {}
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.out))
            if g_out is None:
                continue
            in_grads = node.vjp(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.shape:
                    raise TapeUsageError(f"{node.op}: gradient shape {g.shape} != tensor shape {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                touched[key] = t

        for node in self._nodes:
            for t in node.inputs:
                if t.requires_grad:
                    touched.setdefault(id(t), t)
            touched.setdefault(id(node.out), node.out)
        for key, t in touched.items():
            g = grads.get(key)
            t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype)


def record_op(op: str, out_data, inputs, vjp) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it on the active tape when needed."""
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(op, out, inputs, vjp)
    return out


def _check_mode(mode):
    if mode not in _MODES:
        raise ConfigurationError(f"mode must be one of {_MODES}, got {mode!r}")


def _power_of_two(factor) -> int:
    factor = int(factor)
    if factor < 1 or factor & (factor - 1):
        raise ConfigurationError(f"resampling factor must be a power of two >= 1, got {factor}")
    return factor.bit_length() - 1


# --------------------------------------------------------------------------
# Operators
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Columns laid out as (c * k * k, n * h * w)."""
    n, c, h, w = x.shape
    xt = x.transpose(1, 0, 2, 3)
    if k == 1:
        return np.ascontiguousarray(xt).reshape(c, n * h * w)
    xp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = xt
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * 9, n * h * w)


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    n, c, h, w = shape
    if k == 1:
        return cols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    cols = cols.reshape(c, 3, 3, n, h, w)
    xp = np.zeros((c, n, h + 2, w + 2), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            xp[:, :, i:i + h, j:j + w] += cols[:, i, j]
    return xp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)


def conv2d(x: Tensor, params: ConvParams, mode: str = TRAIN) -> Tensor:
    """Stride-1 cross-correlation plus bias; 3x3 kernels pad by 1, 1x1 by 0.

    ``mode`` is accepted for signature symmetry with :func:`batch_norm`; the
    convolution itself behaves identically in both modes.
    """
    _check_mode(mode)
    weight, bias = params.weight, params.bias
    co, ci, k, _ = weight.shape
    if k not in (1, 3):
        raise ConfigurationError(f"unsupported kernel size {k}")
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d channel mismatch: input shape {x.shape}, weight shape {weight.shape}")
    n, _, h, w = x.shape
    wmat = weight.data.reshape(co, ci * k * k)
    # columns are recomputed in the backward pass rather than kept alive on the tape
    out = wmat @ _im2col(x.data, k)
    out += bias.data.reshape(co, 1)
    out = np.ascontiguousarray(out.reshape(co, n, h, w).transpose(1, 0, 2, 3))

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * h * w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray(_col2im(wmat.T @ gmat, x.shape, k))
        if weight.requires_grad:
            gw = (gmat @ _im2col(x.data, k).T).reshape(weight.shape)
        if bias.requires_grad:
            gb = gmat.sum(axis=1).reshape(bias.shape)
        return gx, gw, gb

    return record_op("conv2d", out, (x, weight, bias), vjp)


def batch_norm(x: Tensor, params: ConvParams, mode: str = TRAIN) -> Tensor:
    """Per-channel normalisation over (n, h, w).

    Train mode normalises with batch statistics (biased variance) and moves
    the running statistics by ``bn_momentum``; infer mode uses the running
    statistics only.
    """
    _check_mode(mode)
    if not params.has_bn:
        raise ConfigurationError("these ConvParams carry no batch-norm parameters")
    gamma, beta = params.bn_gamma, params.bn_beta
    c = x.shape[1]
    if gamma.shape[1] != c:
        raise ShapeError(f"batch_norm channel mismatch: input shape {x.shape}, gamma shape {gamma.shape}")
    eps = params.bn_eps
    xd = x.data

    if mode == TRAIN:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        if not np.all(np.isfinite(var)):
            raise NumericError("non-finite batch variance in batch_norm")
        mom = params.bn_momentum
        params.bn_running_mean[...] = (1 - mom) * params.bn_running_mean + mom * mean.reshape(c)
        params.bn_running_var[...] = (1 - mom) * params.bn_running_var + mom * var.reshape(c)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = gamma.data * xhat + beta.data

        def vjp(g):
            gx = None
            if x.requires_grad:
                dxhat = g * gamma.data
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv / m) * (m * dxhat - s1 - xhat * s2)
            gg = (g * xhat).sum(axis=(0, 2, 3), keepdims=True) if gamma.requires_grad else None
            gbeta = g.sum(axis=(0, 2, 3), keepdims=True) if beta.requires_grad else None
            return gx, gg, gbeta
    else:
        rm = params.bn_running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        rv = params.bn_running_var.reshape(1, c, 1, 1).astype(xd.dtype)
        inv = 1.0 / np.sqrt(rv + eps)
        xhat = (xd - rm) * inv
        out = gamma.data * xhat + beta.data

        def vjp(g):
            gx = g * gamma.data * inv if x.requires_grad else None
            gg = (g * xhat).sum(axis=(0, 2, 3), keepdims=True) if gamma.requires_grad else None
            gbeta = g.sum(axis=(0, 2, 3), keepdims=True) if beta.requires_grad else None
            return gx, gg, gbeta

    return record_op("batch_norm", out, (x, gamma, beta), vjp)


def activation(x: Tensor) -> Tensor:
    """Rectified linear unit."""
    xd = x.data
    out = np.maximum(xd, 0)

    def vjp(g):
        return (g * (xd > 0),)

    return record_op("relu", out, (x,), vjp)


relu = activation


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)

    def vjp(g):
        return (g * out * (1 - out),)

    return record_op("sigmoid", out, (x,), vjp)


def _maxpool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return record_op("maxpool2", out, (x,), vjp)


def downsample2(x: Tensor, factor: int = 2) -> Tensor:
    """Repeated 2x2 stride-2 max pooling, log2(factor) times.

    On ties the gradient goes to the first maximal element of each window.
    """
    steps = _power_of_two(factor)
    _, _, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"downsample2: spatial size {h}x{w} of shape {x.shape} not divisible by {factor}")
    for _ in range(steps):
        x = _maxpool2(x)
    return x


def upsample2(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling: each pixel becomes a factor x factor block."""
    _power_of_two(factor)
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record_op("upsample2", out, (x,), vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    an, ac, ah, aw = a.shape
    bn, _, bh, bw = b.shape
    if (an, ah, aw) != (bn, bh, bw):
        raise ShapeError(f"concat_channels: batch/spatial mismatch between {a.shape} and {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)

    def vjp(g):
        return g[:, :ac], g[:, ac:]

    return record_op("concat", out, (a, b), vjp)


def broadcast_mul(features: Tensor, alpha: Tensor) -> Tensor:
    """Multiply every channel of ``features`` by the single-channel map ``alpha``."""
    fn, _, fh, fw = features.shape
    an, ac, ah, aw = alpha.shape
    if ac != 1 or (an, ah, aw) != (fn, fh, fw):
        raise ShapeError(
            f"broadcast_mul: alpha shape {alpha.shape} must be (n, 1, h, w) matching features {features.shape}"
        )
    fd, ad = features.data, alpha.data
    out = fd * ad

    def vjp(g):
        gf = g * ad if features.requires_grad else None
        ga = (g * fd).sum(axis=1, keepdims=True) if alpha.requires_grad else None
        return gf, ga

    return record_op("broadcast_mul", out, (features, alpha), vjp)


def sum_all(x: Tensor) -> Tensor:
    """Scalar (1, 1, 1, 1) sum of every element."""
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)

    def vjp(g):
        return (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype),)

    return record_op("sum", out, (x,), vjp)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)
