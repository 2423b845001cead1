# autodiff.py
# LeaSE Engine - Reverse-Mode Automatic Differentiation
# Created by Digital COE Gen AI Team

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from leasenas.exceptions import (
    NonFiniteError, NonScalarRootError, NormalizationError, ShapeMismatchError
)


DTYPE = np.float64
LOG_FLOOR = 1e-12
ROW_SUM_TOLERANCE = 1e-9
FD_STEP = 1e-5

_node_ids = itertools.count(1)
_trace_state = threading.local()

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def is_tracing() -> bool:
    """Whether new ops record graph nodes on this thread."""
    return getattr(_trace_state, "enabled", True)


@contextmanager
def no_trace():
    """Disable graph recording for the enclosed block (current thread only)."""
    previous = is_tracing()
    _trace_state.enabled = False
    try:
        yield
    finally:
        _trace_state.enabled = previous


@contextmanager
def tracing():
    """Re-enable graph recording, e.g. for a gradient evaluated inside a no_trace() block."""
    previous = is_tracing()
    _trace_state.enabled = True
    try:
        yield
    finally:
        _trace_state.enabled = previous


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


# Graph types

@dataclass(frozen=True, eq=False)
class Node:
    """One recorded op in the computation graph."""
    id: int
    op: str
    parents: Tuple[Optional["Node"], ...]
    value: "Tensor"
    backward: Optional[BackwardRule] = None

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"


class Tensor:
    """Immutable dense float64 array, optionally attached to a graph node."""

    __slots__ = ("data", "node")

    def __init__(self, data: ArrayLike, node: Optional[Node] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _frozen(np.array(data, dtype=DTYPE))
        self.node = node

    @classmethod
    def _wrap(cls, array: np.ndarray, node: Optional[Node] = None) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = _frozen(np.asarray(array, dtype=DTYPE))
        tensor.node = node
        return tensor

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
    def traced(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError("item", self.shape, ())
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul_elementwise(self, other)
    def __rmul__(self, other): return mul_elementwise(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


def leaf(value: ArrayLike) -> Tensor:
    """Create a gradient-carrying leaf."""
    tensor = Tensor(value)
    if is_tracing():
        tensor.node = Node(id=next(_node_ids), op="leaf", parents=(), value=tensor)
    return tensor


def constant(value: ArrayLike) -> Tensor:
    """Untraced tensor; a traced input is copied off the graph."""
    return Tensor(value)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(op: str, *tensors: Tensor):
    for tensor in tensors:
        if not np.all(np.isfinite(tensor.data)):
            raise NonFiniteError(f"{op} input")


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} output")
    tensor = Tensor._wrap(out)
    if is_tracing() and any(p.node is not None for p in parents):
        tensor.node = Node(
            id=next(_node_ids),
            op=op,
            parents=tuple(p.node for p in parents),
            value=tensor,
            backward=rule,
        )
    return tensor


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


# Elementwise primitives

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a, b)
    _check_finite("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a, b)
    _check_finite("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul_elementwise(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul_elementwise", a, b)
    _check_finite("mul_elementwise", a, b)
    return _record(
        "mul_elementwise", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("div", a, b)
    _check_finite("div", a, b)
    return _record(
        "div", a.data / b.data, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    _check_finite("scale", a)
    s = float(s)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("relu", a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("abs", a)
    sign = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); clamped entries pass no gradient."""
    a = _as_tensor(a)
    _check_finite("clamp_min", a)
    mask = a.data > floor
    return _record("clamp_min", np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def stop_gradient(a) -> Tensor:
    """Same value, cut from the graph."""
    return Tensor._wrap(_as_tensor(a).data)


# Shape primitives

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, tuple(shape)) from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def index(a, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = _as_tensor(a)

    def rule(g):
        grad = np.zeros(a.shape, dtype=DTYPE)
        grad[key] += g
        return (grad,)

    return _record("index", np.array(a.data[key], dtype=DTYPE), (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _record("concat", out, tensors, rule)


# Reductions

def sum_(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("sum", a)
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    return scale(sum_(a), 1.0 / a.size)


def global_avg_pool(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ShapeMismatchError("global_avg_pool", a.shape)
    _check_finite("global_avg_pool", a)
    n, c, h, w = a.shape
    return _record(
        "global_avg_pool", a.data.mean(axis=(2, 3)), (a,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), a.shape).copy(),),
    )


def max_per_example(a) -> Tensor:
    """Max over every non-batch axis, kept as singleton axes for broadcasting."""
    a = _as_tensor(a)
    _check_finite("max_per_example", a)
    flat = a.data.reshape(a.shape[0], -1)
    arg = np.argmax(flat, axis=1)
    out = flat[np.arange(flat.shape[0]), arg].reshape((a.shape[0],) + (1,) * (a.ndim - 1))

    def rule(g):
        grad = np.zeros_like(flat)
        grad[np.arange(flat.shape[0]), arg] = g.reshape(-1)
        return (grad.reshape(a.shape),)

    return _record("max_per_example", out, (a,), rule)


# Linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    _check_finite("matmul", a, b)
    return _record("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, kh, kw, Ho, Wo) strided view; x is already padded
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    return as_strided(
        x, shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False,
    )


def _scatter_windows(cols: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    out = np.zeros(padded_shape, dtype=DTYPE)
    _, _, kh, kw, ho, wo = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _crop(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def _check_window(op: str, x: Tensor, kh: int, kw: int, stride: int, pad: int):
    if x.ndim != 4:
        raise ShapeMismatchError(op, x.shape)
    if stride < 1 or pad < 0:
        raise ValueError(f"{op}: stride must be >= 1 and pad >= 0 (got stride={stride}, pad={pad})")
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeMismatchError(op, x.shape, (kh, kw))


def conv2d(x, k, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation via an im2col strided view: x (N,C,H,W), k (F,C,kh,kw)."""
    x, k = _as_tensor(x), _as_tensor(k)
    if k.ndim != 4 or x.ndim != 4 or k.shape[1] != x.shape[1]:
        raise ShapeMismatchError("conv2d", x.shape, k.shape)
    _check_window("conv2d", x, k.shape[2], k.shape[3], stride, pad)
    _check_finite("conv2d", x, k)

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _windows(padded, k.shape[2], k.shape[3], stride)
    out = np.tensordot(cols, k.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)

    def rule(g):
        grad_k = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        grad_cols = np.tensordot(k.data, g, axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
        grad_x = _crop(_scatter_windows(grad_cols, padded.shape, stride), pad)
        return grad_x, grad_k

    return _record("conv2d", np.ascontiguousarray(out), (x, k), rule)


# Pooling & activations

def avg_pool(a, size: int = 3, stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """Average pooling; padded cells are excluded from each window's divisor."""
    a = _as_tensor(a)
    pad = size // 2 if pad is None else pad
    _check_window("avg_pool", a, size, size, stride, pad)
    _check_finite("avg_pool", a)

    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    padded = np.pad(a.data, widths)
    counts = _windows(np.pad(np.ones((1, 1) + a.shape[2:]), widths), size, size, stride).sum(axis=(2, 3))
    out = _windows(padded, size, size, stride).sum(axis=(2, 3)) / counts

    def rule(g):
        share = np.broadcast_to((g / counts)[:, :, None, None], g.shape[:2] + (size, size) + g.shape[2:])
        return (_crop(_scatter_windows(share, padded.shape, stride), pad),)

    return _record("avg_pool", out, (a,), rule)


def max_pool(a, size: int = 3, stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """Max pooling; gradient goes to the window argmax, ties to the lowest flat index."""
    a = _as_tensor(a)
    pad = size // 2 if pad is None else pad
    _check_window("max_pool", a, size, size, stride, pad)
    _check_finite("max_pool", a)

    padded = np.pad(a.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    windows = _windows(padded, size, size, stride)
    n, c, _, _, ho, wo = windows.shape
    flat = windows.reshape(n, c, size * size, ho, wo)
    arg = np.argmax(flat, axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def rule(g):
        onehot = (np.arange(size * size)[None, None, :, None, None] == arg[:, :, None]) * g[:, :, None]
        cols = onehot.reshape(n, c, size, size, ho, wo)
        return (_crop(_scatter_windows(cols, padded.shape, stride), pad),)

    return _record("max_pool", out, (a,), rule)


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError("softmax_rows", a.shape)
    _check_finite("softmax_rows", a)
    shifted = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)

    def rule(g):
        return (probs * (g - (g * probs).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", probs, (a,), rule)


# Loss

def cross_entropy(pred_probs, target_probs) -> Tensor:
    """
    Batch-mean cross-entropy -sum_k b_k log a_k between probability rows.

    Args:
        pred_probs: N x K predicted probabilities (a)
        target_probs: N x K target probabilities (b)

    Returns:
        Scalar tensor; 0 * log 0 counts as 0 through the 1e-12 log floor
    """
    a, b = _as_tensor(pred_probs), _as_tensor(target_probs)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeMismatchError("cross_entropy", a.shape, b.shape)
    _check_finite("cross_entropy", a, b)
    for name, t in (("pred", a), ("target", b)):
        worst = np.max(np.abs(t.data.sum(axis=1) - 1.0)) if t.shape[0] else 0.0
        if worst > ROW_SUM_TOLERANCE:
            raise NormalizationError(f"cross_entropy: {name} rows deviate from 1 by {worst:.3e}")

    n = a.shape[0]
    clamped = np.maximum(a.data, LOG_FLOOR)
    logs = np.log(clamped)
    value = -(b.data * logs).sum() / n

    def rule(g):
        g = float(g)
        grad_a = np.where(a.data > LOG_FLOOR, -b.data / clamped, 0.0) * g / n
        grad_b = -logs * g / n
        return grad_a, grad_b

    return _record("cross_entropy", np.array(value), (a, b), rule)


def one_hot(labels: Sequence[int], num_classes: int) -> Tensor:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeMismatchError("one_hot", (int(labels.max()) + 1,), (num_classes,))
    out = np.zeros((labels.shape[0], num_classes), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return Tensor._wrap(out)


# Backward pass

class GradMap(Mapping[int, Tensor]):
    """Gradients of one root keyed by leaf node id."""

    def __init__(self, grads: Dict[int, np.ndarray]):
        self._grads = {k: Tensor._wrap(v) for k, v in grads.items()}

    def __getitem__(self, node_id: int) -> Tensor:
        return self._grads[node_id]

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def wrt(self, tensor: Tensor) -> np.ndarray:
        """Gradient for a leaf; zeros when the root does not depend on it."""
        if tensor.node is not None and tensor.node.id in self._grads:
            return self._grads[tensor.node.id].data
        return np.zeros(tensor.shape, dtype=DTYPE)


def _topological_order(root: Node) -> List[Node]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in visited:
            continue
        visited.add(node.id)
        stack.append((node, True))
        for parent in node.parents:
            if parent is not None and parent.id not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> GradMap:
    """
    Reverse-mode accumulation from a scalar root.

    Returns:
        GradMap holding d(root)/d(leaf) for every traced leaf reachable from root
    """
    if root.shape != ():
        raise NonScalarRootError(f"backward: root must be scalar, got shape {root.shape}")
    if root.node is None:
        return GradMap({})

    grads: Dict[int, np.ndarray] = {root.node.id: np.ones((), dtype=DTYPE)}
    leaves: Dict[int, np.ndarray] = {}
    for node in reversed(_topological_order(root.node)):
        upstream = grads.pop(node.id, None)
        if upstream is None:
            continue
        if node.is_leaf:
            leaves[node.id] = upstream
            continue
        for parent, grad in zip(node.parents, node.backward(upstream)):
            if parent is None or grad is None:
                continue
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"backward through {node.op}")
            grads[parent.id] = grads[parent.id] + grad if parent.id in grads else grad
    return GradMap(leaves)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: ArrayLike, h: Optional[float] = None) -> Tensor:
    """
    Central-difference gradient of a scalar function.

    Args:
        f: Deterministic scalar function of an array (may return a scalar Tensor)
        x: Evaluation point
        h: Base step; coordinate i uses h * (1 + |x_i|) (default 1e-5)

    Returns:
        Tensor shaped like x
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    h = FD_STEP if h is None else float(h)
    if h <= 0:
        raise ValueError("finite_diff_gradient: step must be positive")

    def evaluate(point: np.ndarray) -> float:
        with no_trace():
            value = f(point)
        value = float(value.data) if isinstance(value, Tensor) else float(value)
        if not np.isfinite(value):
            raise NonFiniteError("finite_diff_gradient function value")
        return value

    grad = np.zeros_like(base)
    flat, flat_grad = base.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        step = h * (1.0 + abs(flat[i]))
        original = flat[i]
        flat[i] = original + step
        upper = evaluate(base.copy())
        flat[i] = original - step
        lower = evaluate(base.copy())
        flat[i] = original
        flat_grad[i] = (upper - lower) / (2.0 * step)
    return Tensor._wrap(grad)


# Named parameter collections

class ParamSet(Mapping[str, np.ndarray]):
    """Ordered map of named float64 arrays with vector-space arithmetic."""

    def __init__(self, arrays: Mapping[str, ArrayLike]):
        self._arrays = {name: _frozen(np.array(value, dtype=DTYPE)) for name, value in arrays.items()}

    def _like(self, arrays: Dict[str, np.ndarray]) -> "ParamSet":
        return self.__class__(arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({len(self)} tensors, {self.num_params} params)"

    @property
    def num_params(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: a.shape for name, a in self._arrays.items()}

    def _check_compatible(self, other: "ParamSet", op: str):
        if list(self._arrays) != list(other) or any(self[k].shape != other[k].shape for k in self._arrays):
            raise ShapeMismatchError(
                f"ParamSet.{op}", tuple(self.shapes().items()), tuple(other.shapes().items())
            )

    def __add__(self, other: "ParamSet") -> "ParamSet":
        self._check_compatible(other, "add")
        return self._like({k: a + other[k] for k, a in self._arrays.items()})

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        self._check_compatible(other, "sub")
        return self._like({k: a - other[k] for k, a in self._arrays.items()})

    def __mul__(self, factor: float) -> "ParamSet":
        factor = float(factor)
        return self._like({k: a * factor for k, a in self._arrays.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "ParamSet":
        return self * -1.0

    def axpy(self, alpha: float, direction: "ParamSet") -> "ParamSet":
        """self + alpha * direction"""
        self._check_compatible(direction, "axpy")
        alpha = float(alpha)
        return self._like({k: a + alpha * direction[k] for k, a in self._arrays.items()})

    def dot(self, other: "ParamSet") -> float:
        self._check_compatible(other, "dot")
        return float(sum(np.vdot(a, other[k]) for k, a in self._arrays.items()))

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(a, a) for a in self._arrays.values())))

    def zeros_like(self) -> "ParamSet":
        return self._like({k: np.zeros_like(a) for k, a in self._arrays.items()})

    def is_zero(self) -> bool:
        return all(not np.any(a) for a in self._arrays.values())

    def first_non_finite(self) -> Optional[str]:
        for name, array in self._arrays.items():
            if not np.all(np.isfinite(array)):
                return name
        return None

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return self._like({k: fn(a) for k, a in self._arrays.items()})

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([a.reshape(-1) for a in self._arrays.values()])

    def with_flat(self, vector: np.ndarray) -> "ParamSet":
        vector = np.asarray(vector, dtype=DTYPE)
        if vector.size != self.num_params:
            raise ShapeMismatchError("ParamSet.with_flat", (self.num_params,), vector.shape)
        out, offset = {}, 0
        for name, array in self._arrays.items():
            out[name] = vector[offset:offset + array.size].reshape(array.shape)
            offset += array.size
        return self._like(out)

    def as_leaves(self) -> Dict[str, Tensor]:
        return {name: leaf(array) for name, array in self._arrays.items()}

    def as_constants(self) -> Dict[str, Tensor]:
        return {name: Tensor._wrap(array) for name, array in self._arrays.items()}

    def gradients(self, grads: GradMap, leaves: Mapping[str, Tensor]) -> "ParamSet":
        """Collect the gradient of each named leaf into a set shaped like self."""
        return self._like({name: grads.wrt(leaves[name]) for name in self._arrays})


def value_and_grad(
    fn: Callable[..., Tensor],
    *params: ParamSet,
    wrt: Sequence[int] = (0,),
) -> Tuple[float, Tuple[ParamSet, ...]]:
    """
    Evaluate fn on tensor views of params and differentiate w.r.t. selected sets.

    Args:
        fn: Receives one name -> Tensor dict per ParamSet and returns a scalar Tensor
        params: Parameter sets, in fn's argument order
        wrt: Positions of the sets to differentiate

    Returns:
        (loss value, gradients in wrt order)
    """
    with tracing():
        views = [p.as_leaves() if i in wrt else p.as_constants() for i, p in enumerate(params)]
        loss = fn(*views)
        grads = backward(loss)
    return float(loss.data), tuple(params[i].gradients(grads, views[i]) for i in wrt)
