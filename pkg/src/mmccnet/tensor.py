"""Dense tensors with reverse-mode differentiation.

Only the operators the segmentation network needs are provided. Every
operator builds a node holding its operands and a backward rule; calling
:func:`backward` on a scalar walks the reachable graph in reverse creation
order, which is a valid topological order because operands always exist
before the results computed from them.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GradientError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "conv2d",
    "conv_transpose2d",
    "conv_output_size",
    "conv_transpose_output_size",
    "pool_output_size",
    "avg_pool2d",
    "batch_norm2d",
    "relu",
    "sigmoid",
    "apply_activation",
    "concat_channels",
    "crop2d",
    "log",
    "clamp",
    "safe_divide",
    "backward",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GradientError(RuntimeError):
    """Backward pass requested on something that cannot be differentiated."""


_seq = itertools.count()
_grad_enabled = True
_active_tapes: list["Tape"] = []


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    __slots__ = ("parents", "rule", "seq", "op")

    def __init__(self, parents: tuple["Tensor", ...], rule: Callable, op: str):
        self.parents = parents
        self.rule = rule
        self.op = op
        self.seq = next(_seq)


class Tape:
    """Records the nodes created while it is active.

    Use as a context manager around one training step; :meth:`clear` drops
    the backward closures so intermediate buffers can be released.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def clear(self) -> None:
        for node in self.nodes:
            node.rule = None
            node.parents = ()
        self.nodes.clear()


class Tensor:
    """N-dimensional array with an optional gradient.

    ``data`` is a numpy array. Leaves created by the user carry
    ``requires_grad``; results of operators on such leaves carry a graph
    node and receive ``grad`` only if :meth:`retain_grad` was called.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: _Node | None = None
        self._retain = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], rule, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node = None
        out._retain = False
        tracked = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        if tracked:
            node = _Node(tuple(parents), rule, op)
            out.node = node
            for tape in _active_tapes:
                tape.nodes.append(node)
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __float__(self) -> float:
        return self.item()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return _add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -_wrap(other, self))

    def __rsub__(self, other):
        return _add(_wrap(other, self), -self)

    def __neg__(self):
        return _from_unary(self, -self.data, lambda g: -g, "neg")

    def __mul__(self, other):
        return _mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _mul(self, _reciprocal(_wrap(other, self)))

    def __rtruediv__(self, other):
        return _mul(_wrap(other, self), _reciprocal(self))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        p = float(exponent)
        out = x**p
        return _from_unary(self, out, lambda g: g * p * x ** (p - 1), "pow")

    def __getitem__(self, index):
        x = self.data
        out = x[index]

        def rule(g):
            full = np.zeros_like(x)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(np.array(out, copy=True), (self,), rule, "getitem")

    # -- reductions and reshaping --------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self.data
        out = np.asarray(x.sum(axis=axis, keepdims=keepdims))

        def rule(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._from_op(out, (self,), rule, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else int(np.prod([self.data.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        src = self.data.shape
        out = self.data.reshape(*shape)
        return Tensor._from_op(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def astype(self, dtype) -> "Tensor":
        src = self.data.dtype
        out = self.data.astype(dtype)
        return Tensor._from_op(out, (self,), lambda g: (g.astype(src),), "astype")


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _from_unary(x: Tensor, out: np.ndarray, grad_fn, op: str) -> Tensor:
    return Tensor._from_op(out, (x,), lambda g: (grad_fn(g),), op)


def _add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return Tensor._from_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    out = x * y
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)), "mul"
    )


def _reciprocal(a: Tensor) -> Tensor:
    x = a.data
    out = 1.0 / x
    return _from_unary(a, out, lambda g: -g * out * out, "reciprocal")


# -- elementwise -------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _from_unary(x, x.data * mask, lambda g: g * mask, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _from_unary(x, out, lambda g: g * out * (1.0 - out), "sigmoid")


def apply_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")


def log(x: Tensor) -> Tensor:
    v = x.data
    return _from_unary(x, np.log(v), lambda g: g / v, "log")


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    v = x.data
    inside = (v >= low) & (v <= high)
    return _from_unary(x, np.clip(v, low, high), lambda g: g * inside, "clamp")


def safe_divide(num: Tensor, den: Tensor, empty_value: float) -> Tensor:
    """``num / den`` with ``empty_value`` (and zero gradient) wherever ``den == 0``."""
    n, d = num.data, den.data
    zero = d == 0
    d_safe = np.where(zero, 1.0, d)
    out = np.where(zero, empty_value, n / d_safe).astype(n.dtype)

    def rule(g):
        g = np.where(zero, 0.0, g)
        return (_unbroadcast(g / d_safe, n.shape), _unbroadcast(-g * n / (d_safe * d_safe), d.shape))

    return Tensor._from_op(out, (num, den), rule, "safe_divide")


# -- shape helpers -------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (size - 1) * stride - 2 * padding + dilation * (kernel - 1) + 1


def pool_output_size(size: int, window: int, stride: int) -> int:
    return (size - window) // stride + 1


def _check_4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channels, height, width), got shape {x.shape}")


# -- convolution -------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r, s = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r : r + span_h : stride, s : s + span_w : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, padded_shape, kh, kw, ho, wo, stride, dilation) -> np.ndarray:
    n, c = padded_shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r, s = i * dilation, j * dilation
            out[:, :, r : r + span_h : stride, s : s + span_w : stride] += cols[:, :, i, j]
    return out


def _unpad(xp: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return xp
    return xp[:, :, padding:-padding, padding:-padding]


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _validate_conv_args(stride: int, dilation: int, padding: int) -> None:
    if stride < 1 or dilation < 1:
        raise ValueError(f"stride and dilation must be positive, got stride={stride}, dilation={dilation}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")


def _conv_forward(x, w, stride, dilation, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(wd, kw, stride, dilation, padding)
    xp = _pad(x, padding)
    cols = _im2col(xp, kh, kw, ho, wo, stride, dilation)
    out = np.matmul(w.reshape(o, -1), cols).reshape(n, o, ho, wo)
    return out, cols, xp.shape


def _conv_input_grad(g, w, padded_shape, stride, dilation, padding):
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    dcols = np.matmul(w.reshape(o, -1).T, g.reshape(n, o, ho * wo))
    return _unpad(_col2im(dcols, padded_shape, kh, kw, ho, wo, stride, dilation), padding)


def _conv_weight_grad(g, cols, w_shape):
    n, o = g.shape[:2]
    gw = np.tensordot(g.reshape(n, o, -1), cols, axes=([0, 2], [0, 2]))
    return gw.reshape(w_shape)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding, stride and dilation.

    ``weight`` is laid out ``(out_ch, in_ch, kH, kW)``.
    """
    _check_4d(x, "input")
    _check_4d(weight, "weight")
    _validate_conv_args(stride, dilation, padding)
    n, c, h, wd = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"channel mismatch: input has {c} channels (dim 1) but weight expects in_ch={ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match out_ch={o}")
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(wd, kw, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} (dilation {dilation}) does not fit padded input {h + 2 * padding}x{wd + 2 * padding}"
        )
    w = weight.data
    out, cols, padded_shape = _conv_forward(x.data, w, stride, dilation, padding)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def rule(g):
        gx = _conv_input_grad(g, w, padded_shape, stride, dilation, padding) if x.requires_grad else None
        gw = _conv_weight_grad(g, cols, w.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, rule, "conv2d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Transposed convolution, the linear adjoint of :func:`conv2d`.

    ``weight`` is laid out ``(in_ch, out_ch, kH, kW)``, i.e. the same array
    a matching :func:`conv2d` would use to map ``out_ch`` to ``in_ch``.
    """
    _check_4d(x, "input")
    _check_4d(weight, "weight")
    _validate_conv_args(stride, dilation, padding)
    n, c, h, wd = x.shape
    ci, o, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"channel mismatch: input has {c} channels (dim 1) but weight expects in_ch={ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match out_ch={o}")
    ho = conv_transpose_output_size(h, kh, stride, padding, dilation)
    wo = conv_transpose_output_size(wd, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed convolution output {ho}x{wo} is empty")
    w = weight.data
    padded_shape = (n, o, ho + 2 * padding, wo + 2 * padding)
    out = _conv_input_grad(x.data, w, padded_shape, stride, dilation, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def rule(g):
        gx = gw = None
        if x.requires_grad or weight.requires_grad:
            gx_full, cols, _ = _conv_forward(g, w, stride, dilation, padding)
            gx = gx_full if x.requires_grad else None
            if weight.requires_grad:
                # conv2d(out -> x) has cols from g and output-grad x, so swap roles
                gw = _conv_weight_grad(x.data, cols, w.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, rule, "conv_transpose2d")


# -- pooling / normalization -------------------------------------------------


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    _check_4d(x, "input")
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pooling window {window} larger than input {h}x{w}")
    ho, wo = pool_output_size(h, window, stride), pool_output_size(w, window, stride)
    v = x.data
    scale = 1.0 / (window * window)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.zeros((n, c, ho, wo), dtype=v.dtype)
    for i in range(window):
        for j in range(window):
            out += v[:, :, i : i + span_h : stride, j : j + span_w : stride]
    out *= scale

    def rule(g):
        gx = np.zeros_like(v)
        gs = g * scale
        for i in range(window):
            for j in range(window):
                gx[:, :, i : i + span_h : stride, j : j + span_w : stride] += gs
        return (gx,)

    return Tensor._from_op(out, (x,), rule, "avg_pool2d")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place by exponential moving average.
    """
    _check_4d(x, "input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta shape {gamma.shape}/{beta.shape} does not match {c} channels")
    if eps <= 0:
        raise ValueError("eps must be positive")
    v = x.data
    g_ = gamma.data.reshape(1, c, 1, 1)
    if training:
        count = v.shape[0] * v.shape[2] * v.shape[3]
        mu = v.mean(axis=(0, 2, 3))
        centered = v - mu.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        centered = v - running_mean.reshape(1, c, 1, 1).astype(v.dtype)
        var = running_var.astype(v.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(v.dtype).reshape(1, c, 1, 1)
    xhat = centered * inv_std
    out = xhat * g_ + beta.data.reshape(1, c, 1, 1)

    def rule(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * g_
        if training:
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), rule, "batch_norm2d")


# -- structural -------------------------------------------------------------


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    ref = parts[0]
    _check_4d(ref, "part 0")
    for k, p in enumerate(parts[1:], start=1):
        _check_4d(p, f"part {k}")
        if p.shape[0] != ref.shape[0] or p.shape[2:] != ref.shape[2:]:
            raise ShapeError(
                f"part {k} has batch/spatial extent {(p.shape[0],) + p.shape[2:]}, "
                f"expected {(ref.shape[0],) + ref.shape[2:]}"
            )
    if len(parts) == 1:
        return ref
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def rule(g):
        return tuple(g[:, bounds[k] : bounds[k + 1]] for k in range(len(parts)))

    return Tensor._from_op(out, tuple(parts), rule, "concat")


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height x width`` window of a feature map."""
    _check_4d(x, "input")
    if x.shape[2] < height or x.shape[3] < width:
        raise ShapeError(f"cannot crop {x.shape[2:]} to ({height}, {width})")
    if x.shape[2:] == (height, width):
        return x
    src = x.shape
    out = np.ascontiguousarray(x.data[:, :, :height, :width])

    def rule(g):
        full = np.zeros(src, dtype=g.dtype)
        full[:, :, :height, :width] = g
        return (full,)

    return Tensor._from_op(out, (x,), rule, "crop2d")


# -- reverse pass -------------------------------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        order.append(t)
        if t.node is not None:
            stack.extend(t.node.parents)
    # leaves have no node; give them a sequence past every op so they come last
    order.sort(key=lambda t: -1 if t.node is None else t.node.seq, reverse=True)
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> int:
    """Populate ``grad`` of every leaf reachable from ``loss``.

    Gradients accumulate across calls. Returns the number of graph nodes
    visited, each exactly once.
    """
    if grad is None and loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is detached from the graph (no input requires grad)")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    visited = 0
    for t in _reachable(loss):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.node is None or t._retain:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        if t.node.rule is None:
            raise GradientError("graph was cleared by its tape; recompute the forward pass")
        visited += 1
        for parent, pg in zip(t.node.parents, t.node.rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return visited


# -- finite-difference verification -----------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 0.0

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    f: Callable[[], Tensor],
    inputs: dict[str, Tensor] | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    abs_floor: float = 1e-7,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``f`` is re-evaluated with each probed entry of each input perturbed in
    place by ``±step``. The error per entry is ``|a - n| / max(|a|, |n|,
    abs_floor)``, so entries whose gradient is essentially zero are judged
    by absolute difference. ``max_entries`` samples a subset per input.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    named = dict(inputs) if isinstance(inputs, dict) else {f"input{k}": t for k, t in enumerate(inputs)}
    for t in named.values():
        t.grad = None
    out = f()
    if out.size != 1:
        raise GradientError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, t in named.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        with no_grad():
            for k in idx:
                orig = flat[k]
                flat[k] = orig + step
                up = float(f().data)
                flat[k] = orig - step
                down = float(f().data)
                flat[k] = orig
                numeric = (up - down) / (2 * step)
                a = float(analytic.reshape(-1)[k])
                err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
                worst = max(worst, err)
        report.max_rel_error[name] = worst
    return report
