# unips_system/core/tensor.py

import contextlib
import itertools
import logging
import math
import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from unips_system.core.exceptions import DimensionError, GradientError, ParameterError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

# Per-thread autograd state: every training thread owns its own tape sequence,
# grad switch and default dtype.
_state = threading.local()


def _local():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.dtype = np.float32
        _state.counter = itertools.count()
    return _state


def get_default_dtype():
    return _local().dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are created with (float64 is used by gradcheck only)."""
    state = _local()
    previous = state.dtype
    state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        state.dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable recording of operations on the tape inside the block."""
    state = _local()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _local().grad_enabled


class TapeNode:
    """One executed differentiable operation: its inputs and the closure mapping output grad to input grads."""

    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, seq: int, op: str, inputs: Tuple["Tensor", ...],
                 backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]):
        self.seq = seq
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """
    Execution-ordered record of the operations reachable from a tensor.

    Nodes carry a per-thread sequence number assigned when the operation ran, so
    sorting by it restores execution order; replaying in reverse is a valid
    topological order for reverse-mode differentiation.
    """

    def __init__(self, nodes: List[TapeNode]):
        self.nodes = sorted(nodes, key=lambda node: node.seq)

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def collect(cls, root: "Tensor") -> "Tape":
        nodes = {}
        stack = [root]
        while stack:
            tensor = stack.pop()
            node = tensor._node
            if node is None or id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(node.inputs)
        return cls(list(nodes.values()))

    def replay_backward(self, root: "Tensor", seed: np.ndarray) -> int:
        """Propagate ``seed`` from ``root`` back to every leaf; returns the number of nodes visited."""
        pending = {id(root._node): seed}
        visited = 0
        for node in reversed(self.nodes):
            grad_out = pending.pop(id(node), None)
            if grad_out is None:
                continue
            visited += 1
            grads_in = node.backward_fn(grad_out)
            for tensor, grad in zip(node.inputs, grads_in):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._node is None:
                    tensor._accumulate(grad)
                else:
                    key = id(tensor._node)
                    if key in pending:
                        pending[key] = pending[key] + grad
                    else:
                        pending[key] = grad
        return visited


class Tensor:
    """Dense float tensor that optionally participates in reverse-mode differentiation."""

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[TapeNode] = None

    # --- Introspection ---

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # --- Operators ---

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # --- Method forms ---

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)


class Parameter(Tensor):
    """Learnable leaf tensor. Frozen parameters keep ``requires_grad`` False."""

    def __init__(self, data: ArrayLike, requires_grad: bool = True, name: Optional[str] = None):
        super().__init__(data, requires_grad=requires_grad, name=name)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    requires = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._node = TapeNode(next(_local().counter), op, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- Elementwise arithmetic ---

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), _backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), _backward, "div")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def _backward(g):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return _result(np.power(a.data, exponent), (a,), _backward, "pow")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _result(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _result(out_data, (a,), lambda g: (g * 0.5 / out_data,), "sqrt")


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    return _result(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: ArrayLike) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    out_data = 0.5 * x * (1.0 + t)

    def _backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out_data, (a,), _backward, "gelu")


# --- Reductions and shape ops ---

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), _backward, "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tensor_sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from e
    return _result(out_data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swap_last(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise DimensionError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, "concat")


def getitem(a: ArrayLike, index) -> Tensor:
    """Basic and advanced indexing; the backward pass scatter-adds into a zero tensor."""
    a = as_tensor(a)

    def _backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), _backward, "getitem")


def pad(a: ArrayLike, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` follows ``numpy.pad``."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    window = tuple(slice(lo, lo + size) for (lo, _), size in zip(widths, a.shape))
    return _result(np.pad(a.data, widths), (a,), lambda g: (g[window],), "pad")


# --- Linear algebra ---

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: batch dimensions disagree for shapes {a.shape} and {b.shape}") from e

    def _backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(out_data, (a, b), _backward, "matmul")


# --- Normalization ---

def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)),)

    return _result(out_data, (x,), _backward, "softmax")


def layernorm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ParameterError(f"layernorm: eps must be positive, got {eps}")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layernorm: gain {gain.shape} and bias {bias.shape} must match last dimension of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out_data = x_hat * gain.data + bias.data

    def _backward(g):
        lead = tuple(range(g.ndim - 1))
        grad_gain = (g * x_hat).sum(axis=lead)
        grad_bias = g.sum(axis=lead)
        d_hat = g * gain.data
        grad_x = inv_std * (d_hat
                            - d_hat.mean(axis=-1, keepdims=True)
                            - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True))
        return grad_x, grad_gain, grad_bias

    return _result(out_data, (x, gain, bias), _backward, "layernorm")


def l2_normalize(x: ArrayLike, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = sqrt(tensor_sum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


# --- Resampling ---

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic interpolation matrix (half-pixel centers, edge clamped)."""
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix


def upsample_bilinear(x: ArrayLike, out_h: int, out_w: int) -> Tensor:
    """Resize a ``(B, h, w, C)`` grid to ``(B, out_h, out_w, C)``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample_bilinear expects (B, h, w, C), got {x.shape}")
    rows = bilinear_matrix(x.shape[1], out_h).astype(x.dtype)
    cols = bilinear_matrix(x.shape[2], out_w).astype(x.dtype)
    out_data = np.einsum("ia,jb,kabc->kijc", rows, cols, x.data, optimize=True)

    def _backward(g):
        return (np.einsum("ia,jb,kijc->kabc", rows, cols, g, optimize=True),)

    return _result(out_data, (x,), _backward, "upsample_bilinear")


# --- Backward entry point ---

def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise GradientError(f"backward requires a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise GradientError("backward called on a tensor that is not on the tape")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss._node is None:
        loss._accumulate(seed)
        return
    tape = Tape.collect(loss)
    visited = tape.replay_backward(loss, seed)
    logger.debug(f"backward visited {visited} of {len(tape)} tape nodes")
