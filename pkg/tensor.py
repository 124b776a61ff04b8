"""
Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation returns a new Tensor; nothing on a tape is mutated in place.
Gradients flow back through the closures recorded by each operation when
`Tensor.backward()` replays the tape in reverse topological order.
"""

import contextlib
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DimensionError, NonFiniteError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run forward operations without recording them on a tape."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """An n-dimensional array that can take part in a gradient tape."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = ''

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None):
        Tape.from_root(self).backward(grad)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """The recorded operations reachable from one root, in topological order."""

    def __init__(self, root: Tensor, nodes: List[Tensor]):
        self.root = root
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> 'Tape':
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(root, order)

    def backward(self, grad: Optional[np.ndarray] = None):
        """Propagate gradients from the root; leaf grads accumulate across calls."""
        if not self.root.requires_grad:
            raise DimensionError("backward() called on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.root.data)
        grads: Dict[int, np.ndarray] = {id(self.root): np.asarray(grad, dtype=self.root.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'add')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, 'add')


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'sub')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, 'sub')


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'mul')

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, 'mul')


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _result(a.data * factor, (a,), backward, 'scale')


# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, 'matmul')


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of B×C×H×W input with O×C×kh×kw filters (no kernel flip)."""
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {k.shape}")
    batch, channels, height, width = x.shape
    out_channels, kernel_channels, kh, kw = k.shape
    if channels != kernel_channels:
        raise DimensionError(f"conv2d channel mismatch: input {channels}, kernel {kernel_channels}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if pad < 0 or stride < 1:
        raise DimensionError(f"conv2d needs pad >= 0 and stride >= 1, got pad={pad} stride={stride}")
    out_h = (height + 2 * pad - kh) // stride + 1
    out_w = (width + 2 * pad - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv2d output extent {out_h}x{out_w} is empty")

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    out = np.einsum('bchwij,ocij->bohw', windows, k.data, optimize=True)

    def backward(g):
        grad_k = np.einsum('bchwij,bohw->ocij', windows, g, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                contribution = np.einsum('bohw,oc->bchw', g, k.data[:, :, i, j], optimize=True)
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += contribution
        grad_x = grad_padded[:, :, pad:pad + height, pad:pad + width]
        return grad_x, grad_k

    return _result(out, (x, k), backward, 'conv2d')


# Nonlinearities

def relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def backward(g):
        return (g * active,)

    return _result(np.where(active, x.data, 0).astype(x.dtype), (x,), backward, 'relu')


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    positive = x.data >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x.data[positive]))
    exp_x = np.exp(x.data[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, 'sigmoid')


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = shifted / shifted.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), backward, 'softmax_rows')


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of the last axis to unit norm; rows with norm below eps become zero."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.where(norms < eps, 1.0, norms)
    out = np.where(norms < eps, 0.0, x.data / safe).astype(x.dtype)

    def backward(g):
        projected = g - out * (g * out).sum(axis=-1, keepdims=True)
        return (np.where(norms < eps, 0.0, projected / safe).astype(x.dtype),)

    return _result(out, (x,), backward, 'l2_normalize_rows')


# Reductions and shape manipulation

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    if any(x.shape[a] == 0 for a in axes):
        raise DimensionError("sum over an empty axis")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward, 'sum')


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise DimensionError("mean over an empty axis")
    return scale(sum_(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward, 'reshape')


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), (x,), backward, 'transpose')


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}")
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, boundaries, axis=axis))

    return _result(out, tensors, backward, 'concat')


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(np.array(x.data[index]), (x,), backward, 'getitem')


def rot90(x: Tensor, k: int = 1, axes: Tuple[int, int] = (-2, -1)) -> Tensor:
    """Rotate the plane spanned by `axes` counterclockwise k times."""
    def backward(g):
        return (np.ascontiguousarray(np.rot90(g, -k, axes=axes)),)

    return _result(np.ascontiguousarray(np.rot90(x.data, k, axes=axes)), (x,), backward, 'rot90')


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    def backward(g):
        return (np.roll(g, -shift, axis=axis),)

    return _result(np.roll(x.data, shift, axis=axis), (x,), backward, 'roll')


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Double the two trailing (spatial) extents by block replication."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        lead = g.shape[:-2]
        height, width = x.shape[-2:]
        return (g.reshape(*lead, height, 2, width, 2).sum(axis=(-3, -1)),)

    return _result(out, (x,), backward, 'upsample_nearest2x')


def avg_pool2x(x: Tensor) -> Tensor:
    """Average non-overlapping 2×2 blocks of the two trailing (spatial) axes."""
    height, width = x.shape[-2:]
    if height % 2 or width % 2:
        raise DimensionError(f"avg_pool2x needs even spatial extents, got {height}x{width}")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, height // 2, 2, width // 2, 2).mean(axis=(-3, -1))

    def backward(g):
        return ((g.repeat(2, axis=-2).repeat(2, axis=-1) * 0.25).astype(x.dtype),)

    return _result(out, (x,), backward, 'avg_pool2x')


# Losses

def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size

    def backward(g):
        grad = (2.0 / count) * diff * g
        return grad, -grad

    return _result(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred, target), backward, 'mse_loss')


def cross_entropy_logits(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax of the true class over a B×c logit matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_logits expects B×c logits and B labels, got {logits.shape}, {labels.shape}")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DimensionError(f"labels must lie in [0, {classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    batch = labels.size

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _result(np.asarray(-log_probs[rows, labels].mean(), dtype=logits.dtype), (logits,), backward, 'cross_entropy_logits')


# Optimisation

def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Dict:
    """One Adam update with bias correction; params are replaced, never mutated in place."""
    state.setdefault('t', 0)
    state.setdefault('m', [np.zeros_like(p.data) for p in params])
    state.setdefault('v', [np.zeros_like(p.data) for p in params])
    state['t'] += 1
    t = state['t']
    for index, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise DimensionError(f"adam_step: gradient {grad.shape} does not match parameter {param.shape}")
        m = beta1 * state['m'][index] + (1.0 - beta1) * grad
        v = beta2 * state['v'][index] + (1.0 - beta2) * grad * grad
        state['m'][index], state['v'][index] = m, v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
    return state


class Adam:
    """Adam optimizer over a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: Dict = {
            't': 0,
            'm': [np.zeros_like(p.data) for p in self.params],
            'v': [np.zeros_like(p.data) for p in self.params],
        }

    def zero_grad(self):
        for param in self.params:
            param.grad = None

    def step(self):
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# Gradient checking

def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of the scalar fn() w.r.t. tensor.data."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    original = tensor.data.copy()
    with no_grad():
        for index in np.ndindex(*tensor.shape):
            bumped = original.copy()
            bumped[index] += h
            tensor.data = bumped
            upper = float(fn().data)
            bumped = original.copy()
            bumped[index] -= h
            tensor.data = bumped
            lower = float(fn().data)
            grad[index] = (upper - lower) / (2.0 * h)
    tensor.data = original
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale_)
