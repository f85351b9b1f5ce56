"""
Tensor Core
Dense float64 tensors with reverse-mode automatic differentiation over a recorded tape

Every primitive's backward rule is written with the same tensor primitives, so a
gradient computed with create_graph=True is itself recorded and can be
differentiated again (gradients through Grad / Grad-CAM maps).
"""
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import ConfigError, NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

# Per-thread autodiff state: stack of active tapes and the grad-mode flag
_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, 'tapes', None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional['Tape']:
    """Innermost tape currently recording on this thread"""
    stack = _tape_stack()
    return stack[-1] if stack else None


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def _grad_mode(enabled: bool):
    previous = is_grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def no_grad():
    """Disable recording for the enclosed block"""
    with _grad_mode(False):
        yield


@contextmanager
def enable_grad():
    """Re-enable recording inside a no_grad block"""
    with _grad_mode(True):
        yield


class Node:
    """One executed primitive on a tape"""
    __slots__ = ('op', 'inputs', 'attrs', 'output', 'saved', 'needs', 'tape', 'index')

    def __init__(self, op, inputs, attrs):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.output = None
        self.saved = {}
        self.needs = ()
        self.tape = None
        self.index = -1


class Tape:
    """
    Ordered record of executed operations

    Nodes are appended in execution order, so the record is topological.
    A backward pass consumes the tape unless the graph is retained; a consumed
    tape must be reset() before it records again.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False

    def __enter__(self) -> 'Tape':
        if self.consumed:
            raise TapeError("Tape already consumed; call reset() before recording again")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node):
        if self.consumed:
            raise TapeError("Cannot record on a consumed tape")
        node.index = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def reset(self):
        """Drop all recorded nodes and make the tape reusable"""
        self.nodes = []
        self.consumed = False

    def backward(self, loss: 'Tensor', retain_graph: bool = False):
        if loss.node is None or loss.node.tape is not self:
            raise TapeError("Loss was not recorded on this tape")
        backward(loss, retain_graph=retain_graph)

    @contextmanager
    def _recording(self):
        _tape_stack().append(self)
        try:
            with _grad_mode(True):
                yield
        finally:
            _tape_stack().pop()


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """
    Dense row-major float64 array with an optional gradient slot

    Values are immutable after construction; only `grad` changes, plus
    `assign_` which optimizers and snapshot loading use outside any tape.
    """
    __slots__ = ('data', 'requires_grad', 'grad', 'node', 'name')
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"Tensor {name or ''} contains non-finite values")
        self.data = _readonly(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> 'Tensor':
        t = cls.__new__(cls)
        t.data = _readonly(arr)
        t.requires_grad = requires_grad
        t.grad = None
        t.node = None
        t.name = None
        return t

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def assign_(self, values):
        """Replace the values in place (optimizer steps, snapshot loading)"""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"assign_: shape {arr.shape} does not match {self.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"assign_: non-finite values for {self.name or 'tensor'}")
        self.data = _readonly(arr)

    def check_valid(self):
        """Validity check: every value finite"""
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"Tensor {self.name or ''} contains non-finite values")

    # Arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def var(self, axis=None, keepdims: bool = False): return var(self, axis, keepdims)
    def max(self, axis=None, keepdims: bool = False): return max_(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)
    def relu(self): return relu(self)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sqrt(self): return sqrt(self)
    def abs(self): return abs_(self)
    def square(self): return square(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.array(x, dtype=np.float64))


def _const(arr: np.ndarray) -> Tensor:
    return Tensor._wrap(np.asarray(arr, dtype=np.float64))


def _apply(op, *inputs, **attrs) -> Tensor:
    tensors = tuple(_as_tensor(x) for x in inputs)
    node = Node(op, tensors, attrs)
    out = np.asarray(op.forward(node, *[t.data for t in tensors], **attrs), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op.name}: non-finite output for input shapes {[t.shape for t in tensors]}")
    tape = active_tape()
    record = tape is not None and is_grad_enabled() and any(t.requires_grad for t in tensors)
    result = Tensor._wrap(out, requires_grad=record)
    if record:
        node.output = result
        node.needs = tuple(t.requires_grad for t in tensors)
        result.node = node
        tape.record(node)
    return result


def _broadcast_shape(op_name: str, *shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op_name}: cannot broadcast shapes {' and '.join(str(s) for s in shapes)}")


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Sum a broadcast gradient back down to `shape` (axis-sum over stretched axes)"""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = list(range(lead))
    for i, size in enumerate(shape):
        if size == 1 and g.shape[i + lead] != 1:
            axes.append(i + lead)
    reduced = sum_(g, tuple(axes), keepdims=True) if axes else g
    return reshape(reduced, tuple(shape))


def _normalize_axes(axis, ndim: int) -> Optional[tuple]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keepdims_shape(shape: tuple, axes: Optional[tuple]) -> tuple:
    if axes is None:
        return (1,) * len(shape)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

class Primitive:
    name = 'primitive'

    @classmethod
    def forward(cls, node: Node, *arrays, **attrs) -> np.ndarray:
        raise NotImplementedError

    @classmethod
    def backward(cls, node: Node, g: Tensor) -> tuple:
        raise NotImplementedError


class Add(Primitive):
    name = 'add'

    @classmethod
    def forward(cls, node, a, b):
        _broadcast_shape(cls.name, a.shape, b.shape)
        return a + b

    @classmethod
    def backward(cls, node, g):
        a, b = node.inputs
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(Primitive):
    name = 'sub'

    @classmethod
    def forward(cls, node, a, b):
        _broadcast_shape(cls.name, a.shape, b.shape)
        return a - b

    @classmethod
    def backward(cls, node, g):
        a, b = node.inputs
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)


class Mul(Primitive):
    name = 'mul'

    @classmethod
    def forward(cls, node, a, b):
        _broadcast_shape(cls.name, a.shape, b.shape)
        return a * b

    @classmethod
    def backward(cls, node, g):
        a, b = node.inputs
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)


class Div(Primitive):
    name = 'div'

    @classmethod
    def forward(cls, node, a, b):
        _broadcast_shape(cls.name, a.shape, b.shape)
        return a / b

    @classmethod
    def backward(cls, node, g):
        a, b = node.inputs
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class Neg(Primitive):
    name = 'neg'

    @classmethod
    def forward(cls, node, x):
        return -x

    @classmethod
    def backward(cls, node, g):
        return (neg(g),)


class Power(Primitive):
    name = 'pow'

    @classmethod
    def forward(cls, node, x, exponent):
        return np.power(x, exponent)

    @classmethod
    def backward(cls, node, g):
        (x,) = node.inputs
        p = node.attrs['exponent']
        if p == 1:
            return (g,)
        return (mul(g, mul(power(x, p - 1), p)),)


class Exp(Primitive):
    name = 'exp'

    @classmethod
    def forward(cls, node, x):
        return np.exp(x)

    @classmethod
    def backward(cls, node, g):
        return (mul(g, node.output),)


class Log(Primitive):
    name = 'log'

    @classmethod
    def forward(cls, node, x):
        if np.any(x <= 0):
            raise NumericError(f"log: non-positive input (min {x.min()})")
        return np.log(x)

    @classmethod
    def backward(cls, node, g):
        return (div(g, node.inputs[0]),)


class Sqrt(Primitive):
    name = 'sqrt'

    @classmethod
    def forward(cls, node, x):
        if np.any(x < 0):
            raise NumericError(f"sqrt: negative input (min {x.min()})")
        return np.sqrt(x)

    @classmethod
    def backward(cls, node, g):
        return (mul(div(g, node.output), 0.5),)


class Square(Primitive):
    name = 'square'

    @classmethod
    def forward(cls, node, x):
        return x * x

    @classmethod
    def backward(cls, node, g):
        return (mul(mul(g, node.inputs[0]), 2.0),)


class Abs(Primitive):
    name = 'abs'

    @classmethod
    def forward(cls, node, x):
        node.saved['sign'] = np.sign(x)
        return np.abs(x)

    @classmethod
    def backward(cls, node, g):
        return (mul(g, _const(node.saved['sign'])),)


class Relu(Primitive):
    """Gradient at exactly 0 is 0"""
    name = 'relu'

    @classmethod
    def forward(cls, node, x):
        node.saved['mask'] = (x > 0).astype(np.float64)
        return np.maximum(x, 0.0)

    @classmethod
    def backward(cls, node, g):
        return (mul(g, _const(node.saved['mask'])),)


class Sigmoid(Primitive):
    name = 'sigmoid'

    @classmethod
    def forward(cls, node, x):
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    @classmethod
    def backward(cls, node, g):
        s = node.output
        return (mul(g, mul(s, sub(1.0, s))),)


class Softplus(Primitive):
    """(1/beta) * ln(1 + exp(beta * x))"""
    name = 'softplus'

    @classmethod
    def forward(cls, node, x, beta=1.0):
        return np.logaddexp(0.0, beta * x) / beta

    @classmethod
    def backward(cls, node, g):
        (x,) = node.inputs
        beta = node.attrs.get('beta', 1.0)
        return (mul(g, sigmoid(mul(x, beta))),)


class Sum(Primitive):
    name = 'sum'

    @classmethod
    def forward(cls, node, x, axis=None, keepdims=False):
        return np.sum(x, axis=axis, keepdims=keepdims)

    @classmethod
    def backward(cls, node, g):
        (x,) = node.inputs
        axes = node.attrs['axis']
        if not node.attrs['keepdims']:
            g = reshape(g, _keepdims_shape(x.shape, axes))
        return (broadcast_to(g, x.shape),)


class Max(Primitive):
    """Gradient flows to the first maximal element along the reduced axes"""
    name = 'max'

    @classmethod
    def forward(cls, node, x, axis=None, keepdims=False):
        axes = tuple(range(x.ndim)) if axis is None else axis
        rest = tuple(i for i in range(x.ndim) if i not in axes)
        moved = np.transpose(x, rest + axes)
        flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
        arg = np.argmax(flat, axis=-1)
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
        mask = mask.reshape(moved.shape)
        inverse = np.argsort(rest + axes)
        node.saved['mask'] = np.transpose(mask, inverse)
        return np.max(x, axis=axis, keepdims=keepdims)

    @classmethod
    def backward(cls, node, g):
        (x,) = node.inputs
        axes = node.attrs['axis']
        if not node.attrs['keepdims']:
            g = reshape(g, _keepdims_shape(x.shape, axes))
        return (mul(broadcast_to(g, x.shape), _const(node.saved['mask'])),)


class BroadcastTo(Primitive):
    name = 'broadcast'

    @classmethod
    def forward(cls, node, x, shape):
        _broadcast_shape(cls.name, x.shape, shape)
        if np.broadcast_shapes(x.shape, shape) != tuple(shape):
            raise ShapeError(f"broadcast: cannot stretch {x.shape} to {tuple(shape)}")
        return np.broadcast_to(x, shape)

    @classmethod
    def backward(cls, node, g):
        return (_unbroadcast(g, node.inputs[0].shape),)


class Reshape(Primitive):
    name = 'reshape'

    @classmethod
    def forward(cls, node, x, shape):
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}")

    @classmethod
    def backward(cls, node, g):
        return (reshape(g, node.inputs[0].shape),)


class Transpose(Primitive):
    name = 'transpose'

    @classmethod
    def forward(cls, node, x, axes):
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
        return np.transpose(x, axes)

    @classmethod
    def backward(cls, node, g):
        inverse = tuple(int(i) for i in np.argsort(node.attrs['axes']))
        return (transpose(g, inverse),)


class MatMul(Primitive):
    """a[..., K] @ b[K, N]"""
    name = 'matmul'

    @classmethod
    def forward(cls, node, a, b):
        if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return np.matmul(a, b)

    @classmethod
    def backward(cls, node, g):
        a, b = node.inputs
        k, n = b.shape
        ga = matmul(g, transpose(b, (1, 0)))
        a2 = reshape(a, (-1, k)) if a.ndim > 2 else a
        g2 = reshape(g, (-1, n)) if g.ndim > 2 else g
        gb = matmul(transpose(a2, (1, 0)), g2)
        return ga, gb


class GetItem(Primitive):
    name = 'getitem'

    @classmethod
    def forward(cls, node, x, index):
        return np.array(x[index])

    @classmethod
    def backward(cls, node, g):
        return (scatter_add(g, node.attrs['index'], node.inputs[0].shape),)


class ScatterAdd(Primitive):
    """Adjoint of getitem: zeros(shape) with g added at index"""
    name = 'scatter_add'

    @classmethod
    def forward(cls, node, g, index, shape):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, index, g)
        return out

    @classmethod
    def backward(cls, node, g):
        return (getitem(g, node.attrs['index']),)


class Concat(Primitive):
    name = 'concat'

    @classmethod
    def forward(cls, node, *arrays, axis=0):
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError(f"concat: incompatible shapes {[a.shape for a in arrays]} along axis {axis}")

    @classmethod
    def backward(cls, node, g):
        axis = node.attrs['axis'] % g.ndim
        grads = []
        offset = 0
        for t in node.inputs:
            width = t.shape[axis]
            index = tuple(slice(offset, offset + width) if i == axis else slice(None) for i in range(g.ndim))
            grads.append(getitem(g, index))
            offset += width
        return tuple(grads)


class Pad2d(Primitive):
    """Zero padding of the two trailing axes"""
    name = 'pad2d'

    @classmethod
    def forward(cls, node, x, padding):
        widths = ((0, 0),) * (x.ndim - 2) + ((padding, padding), (padding, padding))
        return np.pad(x, widths)

    @classmethod
    def backward(cls, node, g):
        (x,) = node.inputs
        p = node.attrs['padding']
        h, w = x.shape[-2:]
        index = (slice(None),) * (x.ndim - 2) + (slice(p, p + h), slice(p, p + w))
        return (getitem(g, index),)


class Im2Col(Primitive):
    """[M, C, H, W] -> [M, C*kh*kw, OH*OW] patch matrix (no padding)"""
    name = 'im2col'

    @classmethod
    def forward(cls, node, x, kh, kw, stride):
        m, c, h, w = x.shape
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
        cols = np.transpose(windows, (0, 1, 4, 5, 2, 3))
        return np.ascontiguousarray(cols).reshape(m, c * kh * kw, oh * ow)

    @classmethod
    def backward(cls, node, g):
        a = node.attrs
        return (col2im(g, node.inputs[0].shape, a['kh'], a['kw'], a['stride']),)


class Col2Im(Primitive):
    """Adjoint of im2col; overlapping patches accumulate in a fixed loop order"""
    name = 'col2im'

    @classmethod
    def forward(cls, node, cols, shape, kh, kw, stride):
        m, c, h, w = shape
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        patches = cols.reshape(m, c, kh, kw, oh, ow)
        out = np.zeros(shape, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += patches[:, :, i, j]
        return out

    @classmethod
    def backward(cls, node, g):
        a = node.attrs
        return (im2col(g, a['kh'], a['kw'], a['stride']),)


PRIMITIVES: Dict[str, type] = {
    op.name: op for op in (
        Add, Sub, Mul, Div, Neg, Power, Exp, Log, Sqrt, Square, Abs, Relu, Sigmoid,
        Softplus, Sum, Max, BroadcastTo, Reshape, Transpose, MatMul, GetItem,
        ScatterAdd, Concat, Pad2d, Im2Col, Col2Im,
    )
}


def forward_primitive(op_kind: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Run a primitive by name; records on the active tape when an input requires grad"""
    op = PRIMITIVES.get(op_kind)
    if op is None:
        raise ConfigError(f"Unknown primitive '{op_kind}'")
    return _apply(op, *inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor: return _apply(Add, a, b)
def sub(a, b) -> Tensor: return _apply(Sub, a, b)
def mul(a, b) -> Tensor: return _apply(Mul, a, b)
def div(a, b) -> Tensor: return _apply(Div, a, b)
def neg(x) -> Tensor: return _apply(Neg, x)
def exp(x) -> Tensor: return _apply(Exp, x)
def log(x) -> Tensor: return _apply(Log, x)
def sqrt(x) -> Tensor: return _apply(Sqrt, x)
def square(x) -> Tensor: return _apply(Square, x)
def abs_(x) -> Tensor: return _apply(Abs, x)
def relu(x) -> Tensor: return _apply(Relu, x)
def sigmoid(x) -> Tensor: return _apply(Sigmoid, x)


def power(x, exponent: float) -> Tensor:
    return _apply(Power, x, exponent=float(exponent))


def softplus(x, beta: float = 1.0) -> Tensor:
    if beta <= 0:
        raise ConfigError(f"softplus beta must be positive, got {beta}")
    return _apply(Softplus, x, beta=float(beta))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    return _apply(Sum, x, axis=_normalize_axes(axis, x.ndim), keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def var(x, axis=None, keepdims: bool = False) -> Tensor:
    """Biased variance (divides by the element count)"""
    x = _as_tensor(x)
    centered = sub(x, mean(x, axis, keepdims=True))
    return mean(square(centered), axis, keepdims)


def max_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    return _apply(Max, x, axis=axes, keepdims=keepdims)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    if x.shape == tuple(shape):
        return x
    return _apply(BroadcastTo, x, shape=tuple(shape))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    return _apply(Reshape, x, shape=shape)


def transpose(x, axes) -> Tensor:
    return _apply(Transpose, x, axes=tuple(int(a) for a in axes))


def matmul(a, b) -> Tensor:
    return _apply(MatMul, a, b)


def getitem(x, index) -> Tensor:
    return _apply(GetItem, x, index=index)


def scatter_add(g, index, shape) -> Tensor:
    return _apply(ScatterAdd, g, index=index, shape=tuple(shape))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return _apply(Concat, *tensors, axis=axis)


def pad2d(x, padding: int) -> Tensor:
    if padding == 0:
        return _as_tensor(x)
    return _apply(Pad2d, x, padding=int(padding))


def im2col(x, kh: int, kw: int, stride: int) -> Tensor:
    return _apply(Im2Col, x, kh=kh, kw=kw, stride=stride)


def col2im(cols, shape, kh: int, kw: int, stride: int) -> Tensor:
    return _apply(Col2Im, cols, shape=tuple(shape), kh=kh, kw=kw, stride=stride)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ConfigError(
            f"conv2d: output size ({size} + 2*{padding} - {kernel})/{stride} + 1 is not a positive integer"
        )
    return span // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[M,Cin,H,W] with weight[Cout,Cin,kh,kw]"""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    m, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin} ({x.shape} vs {weight.shape})")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)

    cols = im2col(pad2d(x, padding), kh, kw, stride)                   # [M, Cin*kh*kw, OH*OW]
    kernel = transpose(reshape(weight, (cout, cin * kh * kw)), (1, 0))  # [Cin*kh*kw, Cout]
    out = matmul(transpose(cols, (0, 2, 1)), kernel)                    # [M, OH*OW, Cout]
    out = reshape(transpose(out, (0, 2, 1)), (m, cout, oh, ow))
    if bias is not None:
        out = add(out, reshape(bias, (1, cout, 1, 1)))
    return out


def max_pool2d(x, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling"""
    x = _as_tensor(x)
    m, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ConfigError(f"max_pool2d: spatial shape {(h, w)} not divisible by {kernel}")
    blocks = reshape(x, (m, c, h // kernel, kernel, w // kernel, kernel))
    return max_(blocks, axis=(3, 5))


def avg_pool2d(x, kernel: int = 2) -> Tensor:
    x = _as_tensor(x)
    m, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ConfigError(f"avg_pool2d: spatial shape {(h, w)} not divisible by {kernel}")
    blocks = reshape(x, (m, c, h // kernel, kernel, w // kernel, kernel))
    return mean(blocks, axis=(3, 5))


def global_avg_pool(x) -> Tensor:
    return mean(x, axis=(2, 3))


def _bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Interpolation weights with half-pixel centers (align_corners=False)"""
    mat = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    return mat


def upsample_bilinear(x, size: Tuple[int, int]) -> Tensor:
    """Resize the two trailing axes of x to `size`"""
    x = _as_tensor(x)
    h, w = x.shape[-2:]
    oh, ow = size
    if (h, w) == (oh, ow):
        return x
    lead = tuple(range(x.ndim - 2))
    swap = lead + (x.ndim - 1, x.ndim - 2)
    rows = _const(_bilinear_matrix(oh, h).T)  # [H, OH]
    cols = _const(_bilinear_matrix(ow, w).T)  # [W, OW]
    out = matmul(x, cols)                     # [..., H, OW]
    out = matmul(transpose(out, swap), rows)  # [..., OW, OH]
    return transpose(out, swap)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of logits[M, K] against integer labels[M]"""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"softmax_cross_entropy: labels outside [0, {logits.shape[1]})")
    shift = sub(logits, _const(np.max(logits.data, axis=1, keepdims=True)))
    lse = log(sum_(exp(shift), axis=1))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = sum_(mul(shift, _const(onehot)), axis=1)
    return mean(sub(lse, picked))


def softmax(logits) -> np.ndarray:
    """Row softmax as plain values (evaluation only)"""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    shifted = np.exp(data - data.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _accumulate(store: Dict[int, Tensor], key: int, g: Tensor):
    store[key] = g if key not in store else add(store[key], g)


def grad(outputs, inputs, grad_outputs=None, create_graph: bool = False,
         retain_graph: Optional[bool] = None) -> List[Optional[Tensor]]:
    """
    Gradients of outputs with respect to inputs, without touching leaf .grad

    With create_graph=True the reverse pass is itself recorded on the outputs'
    tape, so the returned gradients can be differentiated again.
    Inputs that do not influence the outputs get None.
    """
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    tapes = {id(o.node.tape): o.node.tape for o in outputs if o.node is not None}
    if not tapes:
        raise TapeError("Outputs were not recorded on a tape (no input requires grad, or no active tape)")
    if len(tapes) > 1:
        raise TapeError("Outputs were recorded on different tapes")
    tape = next(iter(tapes.values()))
    if tape.consumed:
        raise TapeError("Tape already consumed by a previous backward pass")
    if retain_graph is None:
        retain_graph = create_graph

    if grad_outputs is None:
        for o in outputs:
            if o.size != 1:
                raise TapeError(f"Gradient seed needed for non-scalar output of shape {o.shape}")
        seeds = [_const(np.ones(o.shape)) for o in outputs]
    else:
        seeds = [_as_tensor(g) for g in (grad_outputs if isinstance(grad_outputs, (list, tuple)) else [grad_outputs])]

    nodes = list(tape.nodes)

    # Only nodes downstream of a requested input contribute
    reach = {id(t) for t in inputs}
    relevant = set()
    for node in nodes:
        if any(id(i) in reach for i in node.inputs):
            reach.add(id(node.output))
            relevant.add(node.index)

    wanted = {id(t): i for i, t in enumerate(inputs)}
    results: List[Optional[Tensor]] = [None] * len(inputs)
    pending: Dict[int, Tensor] = {}

    mode = tape._recording() if create_graph else no_grad()
    with mode:
        for o, seed in zip(outputs, seeds):
            if seed.shape != o.shape:
                raise ShapeError(f"Gradient seed shape {seed.shape} does not match output {o.shape}")
            _accumulate(pending, id(o), seed)
        for node in reversed(nodes):
            key = id(node.output)
            g = pending.pop(key, None)
            if g is None:
                continue
            if key in wanted:
                results[wanted[key]] = g
            if node.index not in relevant:
                continue
            input_grads = node.op.backward(node, g)
            for inp, ig, need in zip(node.inputs, input_grads, node.needs):
                if ig is None or not need or id(inp) not in reach:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{node.op.name}: gradient shape {ig.shape} != input shape {inp.shape}")
                _accumulate(pending, id(inp), ig)
        for i, t in enumerate(inputs):
            if results[i] is None and id(t) in pending:
                results[i] = pending[id(t)]

    if not retain_graph:
        tape.nodes = []
        tape.consumed = True
    return results


def _tape_leaves(tape: Tape) -> List[Tensor]:
    seen = set()
    leaves = []
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t.node is None and id(t) not in seen:
                seen.add(id(t))
                leaves.append(t)
    return leaves


def backward(loss: Tensor, retain_graph: bool = False):
    """Populate .grad of every requires_grad leaf on the loss's tape (accumulates)"""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise TapeError("Loss was not recorded on a tape (no input requires grad, or no active tape)")
    tape = loss.node.tape
    if tape.consumed:
        raise TapeError("Tape already consumed by a previous backward pass")
    leaves = _tape_leaves(tape)
    grads = grad([loss], leaves, retain_graph=retain_graph)
    for leaf, g in zip(leaves, grads):
        if g is None:
            continue
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    kinks: List[int] = field(default_factory=list)
    worst_index: Optional[int] = None
    tol: float = 0.0


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, tol: float = 1e-5,
               floor: float = 1e-3, indices: Optional[Sequence[int]] = None,
               kink_tol: float = 1e-3) -> GradCheckReport:
    """
    Compare tape gradients of scalar f at x against central differences

    Relative error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    A coordinate whose one-sided differences disagree by more than kink_tol
    (relative) sits on a nondifferentiable point; it is flagged and skipped.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    with Tape():
        xt = Tensor(base, requires_grad=True)
        y = f(xt)
        if y.size != 1:
            raise TapeError(f"grad_check needs a scalar function, got shape {y.shape}")
        (g,) = grad(y, [xt])
    analytic = np.zeros_like(base) if g is None else g.data

    def evaluate(values: np.ndarray) -> float:
        with no_grad():
            return f(Tensor(values)).item()

    f0 = evaluate(base)
    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst, worst_index, kinks, checked = 0.0, None, [], 0
    for i in coords:
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        fp = evaluate(plus.reshape(base.shape))
        fm = evaluate(minus.reshape(base.shape))
        forward_slope = (fp - f0) / h
        backward_slope = (f0 - fm) / h
        numeric = (fp - fm) / (2 * h)
        if abs(forward_slope - backward_slope) > kink_tol * max(1.0, abs(numeric)):
            kinks.append(int(i))
            continue
        a = analytic.reshape(-1)[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        checked += 1
        if rel > worst:
            worst, worst_index = rel, int(i)

    if kinks:
        logger.debug(f"grad_check: {len(kinks)} coordinate(s) on a kink excluded")
    return GradCheckReport(
        max_rel_error=worst, passed=worst < tol, checked=checked,
        kinks=kinks, worst_index=worst_index, tol=tol,
    )
