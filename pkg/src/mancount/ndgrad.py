"""Dense float tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` on raw numpy arrays and a ``backward`` that maps the upstream
gradient to one gradient per input.  Applying a function to tracked inputs
records a :class:`Node`; nodes carry a monotonically increasing id, so
sorting the nodes reachable from a loss by id yields a topological order.

There is deliberately no broadcasting: binary elementwise ops require equal
shapes, and the only mixed-shape forms are ``scale`` (python scalar times
tensor) and ``add_row`` (matrix plus a per-column bias vector).

Spatial conventions: a 2D map has shape ``(W, H)`` and is indexed ``[x, y]``.
A WH-length token axis uses ``i = y * W + x`` (see :func:`flatten_spatial`).
"""

from __future__ import annotations

import contextlib
import itertools
import os
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    EvaluationError,
    RankError,
)

DTYPE = np.float64
EPS = 1e-12
LAYERNORM_EPS = 1e-5

DEBUG = os.environ.get("NDGRAD_DEBUG", "") not in ("", "0")

_node_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class FlopCounter:
    def __init__(self):
        self.macs = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs


@contextlib.contextmanager
def count_flops():
    """Count multiply-accumulates performed by matmul and conv2d."""
    counter = FlopCounter()
    prev = getattr(_state, "flops", None)
    _state.flops = counter
    try:
        yield counter
    finally:
        _state.flops = prev


def _add_macs(n: int) -> None:
    counter = getattr(_state, "flops", None)
    if counter is not None:
        counter.macs += int(n)


class Tensor:
    """An N-D float array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or DTYPE)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # never 0-d here; that would gain an axis
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; every form maps onto an explicit op below
    def __add__(self, other):
        return add(self, _as_operand(other, self))

    def __radd__(self, other):
        return add(_as_operand(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_operand(other, self))

    def __rsub__(self, other):
        return sub(_as_operand(other, self), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return NotImplemented
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)


def _as_operand(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if np.ndim(value) == 0:
        return Tensor._wrap(np.full(like.shape, value, dtype=like.data.dtype))
    return Tensor(value)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class Node:
    """One recorded application of a :class:`Function`."""

    __slots__ = ("id", "fn", "ctx", "parents")

    def __init__(self, fn, ctx, parents):
        self.id = next(_node_ids)
        self.fn = fn
        self.ctx = ctx
        self.parents = parents


class Context:
    __slots__ = ("saved", "__dict__")

    def __init__(self):
        self.saved = ()

    def save_for_backward(self, *arrays):
        self.saved = arrays


class Function:
    @staticmethod
    def forward(ctx, *arrays, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(x if isinstance(x, Tensor) else Tensor(x) for x in inputs)
        ctx = Context()
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        if DEBUG:
            _check_finite(cls, out, tensors)
        result = Tensor._wrap(out)
        if _grad_enabled() and any(t.requires_grad for t in tensors):
            result.requires_grad = True
            result.node = Node(cls, ctx, tensors)
        return result


def _check_finite(fn, out, tensors):
    if np.all(np.isfinite(out)):
        return
    if all(np.all(np.isfinite(t.data)) for t in tensors):
        raise EvaluationError(f"{fn.__name__} produced non-finite output from finite inputs")


class Tape:
    """Nodes reachable from a root, in recording (topological) order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes
        self.visited: list[int] = []

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack = [root.node] if root.node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            for parent in node.parents:
                if parent.node is not None and parent.node.id not in seen:
                    stack.append(parent.node)
        return cls([seen[k] for k in sorted(seen)])

    def backward(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {}
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if root.node is None:
            leaves[id(root)] = root
            leaf_grads[id(root)] = seed
        else:
            grads[root.node.id] = seed
        for node in reversed(self.nodes):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            self.visited.append(node.id)
            in_grads = node.fn.backward(node.ctx, g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for parent, pg in zip(node.parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node is not None:
                    key = parent.node.id
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    key = id(parent)
                    leaves[key] = parent
                    leaf_grads[key] = leaf_grads[key] + pg if key in leaf_grads else pg
        for key, leaf in leaves.items():
            g = np.asarray(leaf_grads[key], dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every tracked leaf reachable from a scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that is not tracked")
    tape = Tape.record(loss)
    tape.backward(loss, np.ones(loss.shape, dtype=loss.data.dtype))
    return tape


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _same_shape("add", a, b)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return g, g


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _same_shape("sub", a, b)
        return a - b

    @staticmethod
    def backward(ctx, g):
        return g, -g


class Hadamard(Function):
    @staticmethod
    def forward(ctx, a, b):
        _same_shape("hadamard", a, b)
        ctx.save_for_backward(a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return g * b, g * a


class Scale(Function):
    @staticmethod
    def forward(ctx, a, factor):
        ctx.factor = float(factor)
        return a * ctx.factor

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.factor,)


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        mask = a > 0
        ctx.save_for_backward(mask)
        return np.where(mask, a, 0.0).astype(a.dtype, copy=False)

    @staticmethod
    def backward(ctx, g):
        (mask,) = ctx.saved
        return (g * mask,)


class Abs(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save_for_backward(np.sign(a))
        return np.abs(a)

    @staticmethod
    def backward(ctx, g):
        (sign,) = ctx.saved
        return (g * sign,)


class Sqrt(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.sqrt(a)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return (g * 0.5 / np.maximum(out, EPS),)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def hadamard(a, b) -> Tensor:
    return Hadamard.apply(a, b)


def scale(a, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def neg(a) -> Tensor:
    return Neg.apply(a)


def relu(a) -> Tensor:
    return Relu.apply(a)


def tabs(a) -> Tensor:
    return Abs.apply(a)


def sqrt(a) -> Tensor:
    return Sqrt.apply(a)


_EWISE_BINARY = {"add": add, "sub": sub, "hadamard": hadamard}
_EWISE_UNARY = {"relu": relu, "abs": tabs, "sqrt": sqrt, "neg": neg}


def ewise(kind: str, *operands) -> Tensor:
    """Dispatch an elementwise op by name.

    ``scale`` takes ``(tensor, factor)``; the binary kinds take two tensors of
    equal shape; the rest are unary.
    """
    if kind in _EWISE_BINARY:
        if len(operands) != 2:
            raise ContractError(f"{kind} takes two operands, got {len(operands)}")
        return _EWISE_BINARY[kind](*operands)
    if kind in _EWISE_UNARY:
        if len(operands) != 1:
            raise ContractError(f"{kind} takes one operand, got {len(operands)}")
        return _EWISE_UNARY[kind](operands[0])
    if kind == "scale":
        x, factor = operands
        return scale(x, factor)
    raise ConfigurationError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- structural


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes=None):
        if axes is None:
            if a.ndim != 2:
                raise RankError(f"transpose without axes needs a matrix, got shape {a.shape}")
            axes = (1, 0)
        ctx.axes = tuple(axes)
        return np.transpose(a, ctx.axes)

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, np.argsort(ctx.axes)),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        shape = tuple(shape)
        if int(np.prod(shape)) != a.size:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}")
        ctx.in_shape = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.in_shape),)


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None):
        ctx.in_shape = a.shape
        ctx.axis = axis
        return np.asarray(np.sum(a, axis=axis))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.in_shape).copy(),)


def transpose(a, axes=None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def reshape(a, shape) -> Tensor:
    return Reshape.apply(a, shape=shape)


def tsum(a, axis=None) -> Tensor:
    return Sum.apply(a, axis=axis)


def flatten_spatial(x: Tensor) -> Tensor:
    """``(C, W, H)`` feature map to ``(W*H, C)`` tokens, token ``i = y*W + x``."""
    if x.ndim != 3:
        raise RankError(f"expected (C, W, H), got shape {x.shape}")
    c, w, h = x.shape
    return reshape(transpose(x, (2, 1, 0)), (w * h, c))


def unflatten_spatial(tokens: Tensor, w: int, h: int) -> Tensor:
    """Inverse of :func:`flatten_spatial`."""
    if tokens.ndim != 2 or tokens.shape[0] != w * h:
        raise DimensionError(f"cannot unflatten {tokens.shape} onto a {w}x{h} grid")
    return transpose(reshape(tokens, (h, w, tokens.shape[1])), (2, 1, 0))


# ---------------------------------------------------------------- linear algebra


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise RankError(f"matmul needs matrices, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        _add_macs(a.shape[0] * a.shape[1] * b.shape[1])
        ctx.save_for_backward(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return g @ b.T, a.T @ g


class AddRow(Function):
    """``x[i, j] + b[j]`` for a matrix ``x`` and a bias vector ``b``."""

    @staticmethod
    def forward(ctx, x, b):
        if x.ndim != 2 or b.shape != (x.shape[1],):
            raise DimensionError(f"add_row: bias {b.shape} does not match rows of {x.shape}")
        return x + b

    @staticmethod
    def backward(ctx, g):
        return g, g.sum(axis=0)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def add_row(x, b) -> Tensor:
    return AddRow.apply(x, b)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add_row(y, b)


# ---------------------------------------------------------------- normalisation


class SoftmaxRows(Function):
    @staticmethod
    def forward(ctx, x):
        if x.ndim != 2:
            raise RankError(f"softmax_rows needs a matrix, got shape {x.shape}")
        z = np.exp(x - x.max(axis=1, keepdims=True))
        y = z / z.sum(axis=1, keepdims=True)
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


class LayerNormRows(Function):
    @staticmethod
    def forward(ctx, x, gain, bias):
        if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
            raise DimensionError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
        xc = x - x.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LAYERNORM_EPS)
        xhat = xc * inv
        ctx.save_for_backward(xhat, inv, gain)
        return xhat * gain + bias

    @staticmethod
    def backward(ctx, g):
        xhat, inv, gain = ctx.saved
        dxhat = g * gain
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


class CosineDeviationRows(Function):
    """``1 - cos(E[i], ref)`` per row; rows with a vanishing norm give 0."""

    @staticmethod
    def forward(ctx, e, ref):
        if e.ndim != 2 or ref.shape != (e.shape[1],):
            raise DimensionError(f"cosine deviation: rows {e.shape} vs reference {ref.shape}")
        na = np.sqrt((e * e).sum(axis=1))
        nb = float(np.sqrt((ref * ref).sum()))
        valid = (na >= EPS) & (nb >= EPS)
        denom = np.where(valid, na * nb, 1.0)
        cos = np.where(valid, (e @ ref) / denom, 1.0)
        ctx.save_for_backward(e, ref, na, nb, valid, cos, denom)
        return 1.0 - cos

    @staticmethod
    def backward(ctx, g):
        e, ref, na, nb, valid, cos, denom = ctx.saved
        gv = np.where(valid, g, 0.0)[:, None]
        na_safe = np.where(valid, na, 1.0)[:, None]
        cos_c = cos[:, None]
        de = -gv * (ref[None, :] / denom[:, None] - cos_c * e / (na_safe * na_safe))
        nb_safe = nb if nb >= EPS else 1.0
        dref = -(gv * (e / denom[:, None] - cos_c * ref[None, :] / (nb_safe * nb_safe))).sum(axis=0)
        return de, dref


def softmax_rows(x) -> Tensor:
    return SoftmaxRows.apply(x)


def layer_norm_rows(x, gain, bias) -> Tensor:
    return LayerNormRows.apply(x, gain, bias)


def cosine_deviation_rows(e, ref) -> Tensor:
    return CosineDeviationRows.apply(e, ref)


# ---------------------------------------------------------------- cumulative sums


def _cdf_bl(a: np.ndarray) -> np.ndarray:
    return np.cumsum(np.cumsum(a, axis=-2), axis=-1)


def _cdf_ur(a: np.ndarray) -> np.ndarray:
    flipped = a[..., ::-1, ::-1]
    return _cdf_bl(flipped)[..., ::-1, ::-1]


_CDF = {"bl": _cdf_bl, "ur": _cdf_ur}
_ADJOINT = {"bl": "ur", "ur": "bl"}


class Cumsum2d(Function):
    @staticmethod
    def forward(ctx, c, direction="bl"):
        if direction not in _CDF:
            raise ConfigurationError(f"direction must be 'bl' or 'ur', got {direction!r}")
        ctx.direction = direction
        return np.ascontiguousarray(_CDF[direction](c))

    @staticmethod
    def backward(ctx, g):
        return (np.ascontiguousarray(_CDF[_ADJOINT[ctx.direction]](g)),)


def cumsum2d(c, direction: str = "bl") -> Tensor:
    """2D inclusive prefix sum of a ``(W, H)`` map.

    ``bl`` sums over ``x' <= x, y' <= y``; ``ur`` over ``x' >= x, y' >= y``.
    """
    if c.ndim != 2:
        raise RankError(f"cumsum2d needs a 2D map, got shape {c.shape}")
    return Cumsum2d.apply(c, direction=direction)


def cumsum2d_stack(c, direction: str = "bl") -> Tensor:
    """:func:`cumsum2d` applied independently to each map of a ``(B, W, H)`` stack."""
    if c.ndim != 3:
        raise RankError(f"cumsum2d_stack needs a (B, W, H) stack, got shape {c.shape}")
    return Cumsum2d.apply(c, direction=direction)


# ---------------------------------------------------------------- convolution


def _conv_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv2d: ({n} + 2*{pad} - {k}) / {stride} + 1 is not a positive integer"
        )
    return span // stride + 1


class Conv2d(Function):
    @staticmethod
    def forward(ctx, x, w, b=None, stride=1, pad=0):
        if x.ndim != 3 or w.ndim != 4:
            raise RankError(f"conv2d expects (Cin, W, H) and (Cout, Cin, k, k), got {x.shape}, {w.shape}")
        cout, cin, k, k2 = w.shape
        if k != k2 or k % 2 == 0:
            raise ConfigurationError(f"conv2d kernel must be square and odd, got {k}x{k2}")
        if x.shape[0] != cin:
            raise DimensionError(f"conv2d: input has {x.shape[0]} channels, kernel expects {cin}")
        if b is not None and b.shape != (cout,):
            raise DimensionError(f"conv2d: bias {b.shape} does not match {cout} output channels")
        if stride < 1 or pad < 0:
            raise ConfigurationError(f"conv2d: stride {stride}, pad {pad}")
        ow = _conv_extent(x.shape[1], k, stride, pad)
        oh = _conv_extent(x.shape[2], k, stride, pad)
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, ::stride, ::stride][:, :ow, :oh]
        cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ow * oh, cin * k * k)
        _add_macs(ow * oh * cin * k * k * cout)
        out = cols @ w.reshape(cout, -1).T
        if b is not None:
            out = out + b
        ctx.save_for_backward(cols, w)
        ctx.geom = (x.shape, xp.shape, ow, oh, stride, pad, b is not None)
        return np.ascontiguousarray(out.T.reshape(cout, ow, oh))

    @staticmethod
    def backward(ctx, g):
        cols, w = ctx.saved
        x_shape, xp_shape, ow, oh, stride, pad, has_bias = ctx.geom
        cout, cin, k, _ = w.shape
        gm = g.reshape(cout, ow * oh)
        dw = (gm @ cols).reshape(w.shape)
        dcols = (gm.T @ w.reshape(cout, -1)).reshape(ow, oh, cin, k, k)
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        for a in range(k):
            for c in range(k):
                dxp[:, a : a + stride * ow : stride, c : c + stride * oh : stride] += dcols[
                    :, :, :, a, c
                ].transpose(2, 0, 1)
        dx = dxp[:, pad : pad + x_shape[1], pad : pad + x_shape[2]] if pad else dxp
        db = g.sum(axis=(1, 2)) if has_bias else None
        return (np.ascontiguousarray(dx), dw, db) if has_bias else (np.ascontiguousarray(dx), dw)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a ``(Cin, W, H)`` input with ``(Cout, Cin, k, k)`` kernels."""
    if b is None:
        return Conv2d.apply(x, w, stride=stride, pad=pad)
    return Conv2d.apply(x, w, b, stride=stride, pad=pad)


class UpsampleNearest(Function):
    @staticmethod
    def forward(ctx, x, factor):
        if x.ndim != 3:
            raise RankError(f"upsample_nearest needs (C, W, H), got {x.shape}")
        ctx.factor = factor
        return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)

    @staticmethod
    def backward(ctx, g):
        f = ctx.factor
        c, w, h = g.shape
        return (g.reshape(c, w // f, f, h // f, f).sum(axis=(2, 4)),)


def upsample_nearest(x, factor: int) -> Tensor:
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ConfigurationError(f"upsample factor must be an integer >= 1, got {factor!r}")
    return UpsampleNearest.apply(x, factor=int(factor))


class AvgPool2(Function):
    @staticmethod
    def forward(ctx, x):
        if x.ndim != 3:
            raise RankError(f"avg_pool2 needs (C, W, H), got {x.shape}")
        c, w, h = x.shape
        if w % 2 or h % 2:
            raise ConfigurationError(f"avg_pool2 needs even extents, got {w}x{h}")
        return x.reshape(c, w // 2, 2, h // 2, 2).mean(axis=(2, 4))

    @staticmethod
    def backward(ctx, g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)


def avg_pool2(x) -> Tensor:
    """2x2 mean pooling with stride 2 over the spatial axes."""
    return AvgPool2.apply(x)


# ---------------------------------------------------------------- gradient checking


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps the tensor(s) in ``x`` to a scalar tensor.  The error for one
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data, requires_grad=True) for t in xs]
    out = f(*leaves)
    if out.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise EvaluationError("function under check returned a non-finite value")
    backward(out)
    base = [Tensor._wrap(leaf.data) for leaf in leaves]
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        work = np.array(xs[k].data, dtype=DTYPE)
        for idx in np.ndindex(work.shape):
            orig = work[idx]
            work[idx] = orig + h
            fp = _eval_scalar(f, base, k, work)
            work[idx] = orig - h
            fm = _eval_scalar(f, base, k, work)
            work[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def _eval_scalar(f, base, k, arr) -> float:
    args = list(base)
    args[k] = Tensor(arr)
    with no_grad():
        value = f(*args)
    v = float(np.asarray(value.data).reshape(()))
    if not np.isfinite(v):
        raise EvaluationError("function under check returned a non-finite value")
    return v
