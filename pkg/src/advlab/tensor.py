"""
Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray`` and, when gradients are enabled and
one of its inputs requires them, remembers the tensors it was computed from
together with a closure that maps the upstream gradient to gradients of those
inputs.  :func:`backward` walks that graph in reverse topological order.

Gradients can be requested for any leaf, not only for model parameters, which
is what the input-space attacks rely on.

Two precisions are supported: float32 (default, used for training and
evaluation) and float64 (used for finite-difference gradient checks)::

    with precision(np.float64):
        x = Tensor(np.random.rand(2, 1, 8, 8), requires_grad=True)
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .errors import ConfigError, DimensionError, InvalidStateError, UsageError


class _Mode(threading.local):
    # per thread, so a no_grad() block in one worker never disables recording in another
    dtype = np.dtype(np.float32)
    grad_enabled = True


_MODE = _Mode()

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def default_dtype() -> np.dtype:
    return _MODE.dtype


def set_default_dtype(dtype) -> None:
    """Set the float dtype for new tensors in the calling thread."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported float mode {dtype}; use float32 or float64")
    _MODE.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _MODE.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    previous = _MODE.grad_enabled
    _MODE.grad_enabled = False
    try:
        yield
    finally:
        _MODE.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _MODE.grad_enabled


class Tensor:
    """N-dimensional array node in a reverse-mode computation graph.

    Args:
        data: array-like; converted to the current default float dtype.
        requires_grad: whether :func:`backward` should populate ``grad``.
    """

    __array_priority__ = 100  # make ndarray + Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_MODE.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _MODE.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- array protocol --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data, out.requires_grad, out.grad = self.data, False, None
        out._parents, out._backward, out.op = (), None, "leaf"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------------

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
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        t = Tensor.__new__(Tensor)
        t.data, t.requires_grad, t.grad = x, False, None
        t._parents, t._backward, t.op = (), None, "leaf"
        return t
    return Tensor(x)


def _constant_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=ref.dtype)
    t.requires_grad, t.grad = False, None
    t._parents, t._backward, t.op = (), None, "const"
    return t


# -- graph traversal -----------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Gradients add over fan-out and across repeated calls; clear them with
    ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- elementwise and reductions ------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _constant_like(a, b)
    b = _constant_like(b, a)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _backward, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _constant_like(a, b)
    b = _constant_like(b, a)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), _backward, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _constant_like(a, b)
    b = _constant_like(b, a)

    def _backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), _backward, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _constant_like(a, b)
    b = _constant_like(b, a)

    def _backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), _backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor._from_op(a.data**exponent, (a,), _backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def _backward(g):
        return (g * out,)

    return Tensor._from_op(out, (a,), _backward, "exp")


def log(a: Tensor) -> Tensor:
    def _backward(g):
        return (g / a.data,)

    return Tensor._from_op(np.log(a.data), (a,), _backward, "log")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return Tensor._from_op(np.asarray(out, dtype=a.dtype), (a,), _backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    def _backward(g):
        return (g.reshape(a.shape),)

    return Tensor._from_op(a.data.reshape(shape), (a,), _backward, "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), _backward, "matmul")


# -- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def _backward(g):
        return (np.where(x.data > 0, g, 0).astype(g.dtype, copy=False),)

    return Tensor._from_op(out, (x,), _backward, "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    cdf = ndtr(x.data).astype(x.dtype, copy=False)

    def _backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * x.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + x.data * pdf),)

    return Tensor._from_op(x.data * cdf, (x,), _backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped into the open interval (0, 1).

    In float32 the logistic of |z| > ~17 rounds to exactly 0 or 1; the clip
    keeps every output strictly inside the interval.
    """
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    info = np.finfo(x.dtype)
    out = np.clip(out, info.tiny, 1.0 - info.epsneg)

    def _backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), _backward, "sigmoid")


# -- stochastic layers -----------------------------------------------------------


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)``; identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))

    def _backward(g):
        return (g * mask,)

    return Tensor._from_op(x.data * mask, (x,), _backward, "dropout")


def add_gaussian_noise(x: Tensor, std: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Add i.i.d. N(0, std^2) noise in train mode; the noise is a constant for backprop."""
    if std < 0:
        raise ConfigError(f"noise std must be non-negative, got {std}")
    if not training or std == 0.0:
        return x
    if rng is None:
        raise ConfigError("noise injection in train mode needs a random generator")
    noise = (rng.standard_normal(x.shape) * std).astype(x.dtype)

    def _backward(g):
        return (g,)

    return Tensor._from_op(x.data + noise, (x,), _backward, "noise")


# -- losses --------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - shifted[rows, labels]).mean(), dtype=logits.dtype)

    def _backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (g / n),)

    return Tensor._from_op(loss, (logits,), _backward, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    target = _constant_like(target, pred)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} and target {target.shape} differ")
    diff = pred.data - target.data
    count = diff.size

    def _backward(g):
        d = diff * (g * 2.0 / count)
        return d, (-d if target.requires_grad else None)

    return Tensor._from_op(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred, target), _backward, "mse")


# -- dense and convolutional layers --------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, F) and ``weight`` (G, F)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input features (axis 1) of {x.shape} do not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _backward, "linear")


def _out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _patches(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """im2col on an NHWC array: rows are output pixels, columns are (ky, kx, c)."""
    n, h, w, c = x.shape
    oh, ow = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if padding:
        xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
        xp[:, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : stride * oh : stride, : stride * ow : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * oh * ow, kh * kw * c), oh, ow


def _fold(cols: np.ndarray, shape, kh: int, kw: int, stride: int, padding: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`_patches`: scatter-add patch rows back into an NHWC array."""
    n, h, w, c = shape
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, :, i, j]
    return out[:, padding : padding + h, padding : padding + w]


def _nhwc(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 2, 3, 1)


def _nchw(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def _check_conv_args(name: str, x: Tensor, weight: Tensor, in_axis: int, stride: int, padding: int) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name}: input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"{name}: weight must be 4-D, got shape {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise DimensionError(
            f"{name}: input channels (axis 1) = {x.shape[1]} but weight axis {in_axis} = {weight.shape[in_axis]}"
        )
    if stride < 1:
        raise ConfigError(f"{name}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"{name}: padding must be >= 0, got {padding}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an (O, I, Kh, Kw) kernel.

    Output spatial size is ``(H + 2 * padding - Kh) // stride + 1``.
    """
    _check_conv_args("conv2d", x, weight, 1, stride, padding)
    o, c, kh, kw = weight.shape
    n, _, h, w = x.shape
    if _out_size(h, kh, stride, padding) < 1 or _out_size(w, kw, stride, padding) < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (axes 2, 3)")
    cols, oh, ow = _patches(_nhwc(x.data), kh, kw, stride, padding)
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = _nchw(out.reshape(n, oh, ow, o))

    def _backward(g):
        g2 = np.ascontiguousarray(_nhwc(g)).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            if stride == 1 and kh == kw and padding <= kh - 1:
                # stride-1 input gradient is a full correlation with the flipped kernel
                flipped = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, c)
                gcols, _, _ = _patches(_nhwc(g), kh, kw, 1, kh - 1 - padding)
                gx = _nchw((gcols @ flipped).reshape(n, h, w, c))
            else:
                gx = _nchw(_fold(g2 @ w2, (n, h, w, c), kh, kw, stride, padding, oh, ow))
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _backward, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution; ``weight`` is (I, O, Kh, Kw) with I the input channels.

    The forward map is the adjoint (input gradient) of :func:`conv2d` with the
    same weight and geometry.  Output size is ``(H - 1) * stride - 2 * padding + Kh``.
    """
    _check_conv_args("conv_transpose2d", x, weight, 0, stride, padding)
    cin, cout, kh, kw = weight.shape
    n, _, h, w = x.shape
    out_h = (h - 1) * stride - 2 * padding + kh
    out_w = (w - 1) * stride - 2 * padding + kw
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv_transpose2d: non-positive output size {out_h}x{out_w} (axes 2, 3)")
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(cin, -1)
    x2 = np.ascontiguousarray(_nhwc(x.data)).reshape(-1, cin)
    out = _fold(x2 @ w2, (n, out_h, out_w, cout), kh, kw, stride, padding, h, w)
    if bias is not None:
        out = out + bias.data
    out = _nchw(out)

    def _backward(g):
        gcols, _, _ = _patches(_nhwc(g), kh, kw, stride, padding)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _nchw((gcols @ w2.T).reshape(n, h, w, cin))
        if weight.requires_grad:
            gw = (x2.T @ gcols).reshape(cin, kh, kw, cout).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _backward, "conv_transpose2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; the gradient goes to the first maximum of each window in row-major order."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if stride == window:
        if h % window or w % window:
            raise DimensionError(f"maxpool2d: spatial size {h}x{w} (axes 2, 3) not divisible by window {window}")
        oh, ow = h // window, w // window
        blocks = x.data.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, oh, ow, window * window)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

        def _backward(g):
            gb = np.zeros((n, c, oh, ow, window * window), dtype=g.dtype)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
            gb = gb.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
            return (gb.reshape(n, c, h, w),)

        return Tensor._from_op(out, (x,), _backward, "maxpool2d")

    if h < window or w < window:
        raise DimensionError(f"maxpool2d: window {window} larger than input {h}x{w} (axes 2, 3)")
    flat = x.data.reshape(n * c, h, w, 1)
    cols, oh, ow = _patches(flat, window, window, stride, 0)
    idx = cols.argmax(axis=1)
    out = np.take_along_axis(cols, idx[:, None], axis=1).reshape(n, c, oh, ow)

    def _backward(g):
        gcols = np.zeros_like(cols)
        np.put_along_axis(gcols, idx[:, None], g.reshape(-1, 1), axis=1)
        return (_fold(gcols, (n * c, h, w, 1), window, window, stride, 0, oh, ow).reshape(x.shape),)

    return Tensor._from_op(out, (x,), _backward, "maxpool2d")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=None) -> "BatchNormState":
        dtype = dtype or _MODE.dtype
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization of an NCHW batch.

    In train mode the batch mean and biased variance normalize the input and the
    running statistics move by ``momentum`` toward the batch statistics (the
    running variance uses the unbiased estimate).  Eval mode uses the running
    statistics only.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d: input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: {c} channels (axis 1) but gamma {gamma.shape}, beta {beta.shape}")
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]

    if not training:
        inv_std = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + x.dtype.type(eps))
        xhat = (x.data - state.running_mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]

        def _backward_eval(g):
            gx = g * (g_ * inv_std[None, :, None, None]) if x.requires_grad else None
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            return gx, gg, gb

        return Tensor._from_op(xhat * g_ + b_, (x, gamma, beta), _backward_eval, "batchnorm2d")

    if n < 2:
        raise InvalidStateError("batchnorm2d: train mode needs a batch of at least 2 samples")
    count = n * h * w
    mu = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mu[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + x.dtype.type(eps))).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]

    state.running_mean[...] = (1.0 - momentum) * state.running_mean + momentum * mu
    state.running_var[...] = (1.0 - momentum) * state.running_var + momentum * var * (count / (count - 1))

    def _backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            gx = (inv_std[None, :, None, None] / count) * (count * dxhat - s1 - xhat * s2)
        return gx, (gg if gamma.requires_grad else None), (gb if beta.requires_grad else None)

    return Tensor._from_op(xhat * g_ + b_, (x, gamma, beta), _backward, "batchnorm2d")
