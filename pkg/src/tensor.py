"""
Minimal dense tensor with reverse-mode automatic differentiation.
Implements only the operators the localization pipeline needs, on a numpy backend.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
ELEMENTWISE_KINDS = ("add", "mul", "sigmoid", "relu")
UPSAMPLE_MODES = ("bilinear", "nearest")

_grad_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


class TapeError(RuntimeError):
    """Raised when a backward pass is requested on an invalid graph."""


def is_grad_enabled() -> bool:
    """Whether new operations are recorded on the tape in this thread."""
    return not getattr(_grad_state, "disabled", False)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording for inference in the current thread."""
    previous = getattr(_grad_state, "disabled", False)
    _grad_state.disabled = True
    try:
        yield
    finally:
        _grad_state.disabled = previous


class Tensor:
    """Dense float array that can take part in the gradient tape."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(array) if requires_grad else None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False
        self.op = "leaf"

    @classmethod
    def zeros(cls, *shape: int, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, *shape: int, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> "Tensor":
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def backward(self):
        backward(self)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def _record(data: np.ndarray, parents: Tuple[Tensor, ...], op: str,
            grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op result, registering its gradient rule when any parent is tracked."""
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        for parent in parents:
            if parent._consumed and parent._parents:
                raise TapeError(f"operand of '{op}' belongs to a graph already consumed by backward")
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """Shapes must match except for size-1 dims outside the channel axis."""
    if a == b:
        return a
    if len(a) != len(b):
        raise ShapeError(f"rank mismatch: {a} vs {b}")
    out = []
    for axis, (da, db) in enumerate(zip(a, b)):
        if da == db:
            out.append(da)
        elif axis != 1 and 1 in (da, db):
            out.append(max(da, db))
        else:
            raise ShapeError(f"cannot broadcast {a} with {b}: dim {axis} is {da} vs {db}")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), "add", grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), "mul", grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    value = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def grad_fn(g):
        return (g * value * (1.0 - value),)

    return _record(value, (a,), "sigmoid", grad_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _record(np.where(mask, a.data, 0).astype(a.dtype), (a,), "relu", grad_fn)


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """
    Dispatch one of the elementwise ops by name.

    Args:
        kind (str): One of add, mul, sigmoid, relu
        a (Tensor): First operand
        b (Tensor): Second operand for binary ops

    Returns:
        Tensor: Result with its gradient rule registered
    """
    if kind not in ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise op '{kind}', expected one of {ELEMENTWISE_KINDS}")
    if kind in ("add", "mul"):
        if b is None:
            raise ValueError(f"'{kind}' needs two operands")
        return add(a, b) if kind == "add" else mul(a, b)
    return sigmoid(a) if kind == "sigmoid" else relu(a)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """
    2-D cross-correlation over (batch, channel, height, width) input.

    Args:
        x (Tensor): Input of shape (N, C, H, W)
        kernel (Tensor): Weights of shape (O, C, kh, kw)
        bias (Tensor): Optional per-output-channel bias of shape (O,)
        stride (int): Step between windows, >= 1
        pad (int): Zero padding on each spatial side, >= 0

    Returns:
        Tensor: Output of shape (N, O, Ho, Wo)
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"kernel expects {ci} input channels, input has {c}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}, pad {pad}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    weight = kernel.data.reshape(o, -1)
    out = (cols @ weight.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        grad_kernel = (g_mat.T @ cols).reshape(kernel.shape)
        dcols = (g_mat @ weight).reshape(n, ho, wo, c, kh, kw)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, pad:pad + h, pad:pad + w] if pad else grad_padded
        grads = [grad_x, grad_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, parents, "conv2d", grad_fn)


def global_avg_pool(t: Tensor) -> Tensor:
    """Spatial mean of a (N, C, H, W) tensor, kept as (N, C, 1, 1)."""
    if t.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {t.shape}")
    h, w = t.shape[2:]

    def grad_fn(g):
        return (np.broadcast_to(g / (h * w), t.shape).astype(t.dtype),)

    return _record(t.data.mean(axis=(2, 3), keepdims=True), (t,), "global_avg_pool", grad_fn)


def interpolation_matrix(n_in: int, n_out: int, mode: str = "bilinear", dtype=np.float64) -> np.ndarray:
    """
    Row-stochastic (n_out, n_in) matrix for 1-D resampling.

    Bilinear uses the align-corners-false convention: source = (dst + 0.5) * n_in / n_out - 0.5,
    clamped at 0.
    """
    if mode not in UPSAMPLE_MODES:
        raise ValueError(f"unknown upsample mode '{mode}', expected one of {UPSAMPLE_MODES}")
    if n_out < n_in:
        raise ShapeError(f"downsampling {n_in} -> {n_out} is not supported")
    rows = np.arange(n_out)
    scale = n_in / n_out
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    if mode == "nearest":
        idx = np.minimum(np.floor(rows * scale).astype(np.int64), n_in - 1)
        matrix[rows, idx] = 1.0
        return matrix.astype(dtype)
    src = np.maximum((rows + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    np.add.at(matrix, (rows, i0), 1.0 - frac)
    np.add.at(matrix, (rows, i1), frac)
    return matrix.astype(dtype)


def upsample(t: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    """
    Resize the spatial dims of a 4-D tensor up to (out_h, out_w).

    Args:
        t (Tensor): Input of shape (N, C, H, W)
        out_h (int): Target height, >= H
        out_w (int): Target width, >= W
        mode (str): bilinear (align-corners-false) or nearest

    Returns:
        Tensor: Output of shape (N, C, out_h, out_w)
    """
    if t.ndim != 4:
        raise ShapeError(f"upsample expects 4-D input, got {t.shape}")
    h, w = t.shape[2:]
    if (h, w) == (out_h, out_w):
        return t
    rows = interpolation_matrix(h, out_h, mode, t.dtype)
    cols = interpolation_matrix(w, out_w, mode, t.dtype)

    def grad_fn(g):
        return (rows.T @ g @ cols,)

    return _record(rows @ t.data @ cols.T, (t,), f"upsample_{mode}", grad_fn)


def upsample_bilinear(t: Tensor, out_h: int, out_w: int) -> Tensor:
    return upsample(t, out_h, out_w, "bilinear")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias for x of shape (N, in) and weight of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects (N, {weight.shape[-1]}) input for weight {weight.shape}, got {x.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, "linear", grad_fn)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    def grad_fn(g):
        return (g.reshape(t.shape),)

    return _record(t.data.reshape(tuple(shape)), (t,), "reshape", grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    reference = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(reference) or other[:axis] + other[axis + 1:] != reference[:axis] + reference[axis + 1:]:
            raise ShapeError(f"concat along axis {axis}: {tuple(reference)} vs {t.shape}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return np.split(g, bounds, axis=axis)

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", grad_fn)


def tensor_sum(t: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.broadcast_to(g, t.shape).astype(t.dtype),)

    return _record(np.asarray(t.data.sum(), dtype=t.dtype), (t,), "sum", grad_fn)


def tensor_mean(t: Tensor) -> Tensor:
    size = t.data.size

    def grad_fn(g):
        return (np.broadcast_to(g / size, t.shape).astype(t.dtype),)

    return _record(np.asarray(t.data.mean(), dtype=t.dtype), (t,), "mean", grad_fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (N, K) logits and (N,) labels, got {logits.shape} and {labels.shape}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()

    def grad_fn(g):
        probs = np.exp(log_probs)
        probs[np.arange(n), labels] -= 1.0
        return ((g * probs / n).astype(logits.dtype),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", grad_fn)


def masked_bce(pred: Tensor, target: np.ndarray, weight: np.ndarray) -> Tensor:
    """
    Weighted binary cross-entropy on probabilities, divided by the total pixel count.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs; pixels with
    weight 0 contribute neither loss nor gradient.
    """
    target = np.asarray(target, dtype=pred.dtype)
    weight = np.asarray(weight, dtype=pred.dtype)
    if target.shape != pred.shape or weight.shape != pred.shape:
        raise ShapeError(f"masked_bce shapes differ: pred {pred.shape}, target {target.shape}, weight {weight.shape}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    denom = pred.data.size
    per_pixel = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    loss = (weight * per_pixel).sum() / denom

    def grad_fn(g):
        return ((g * weight * (p - target) / (p * (1.0 - p)) / denom).astype(pred.dtype),)

    return _record(np.asarray(loss, dtype=pred.dtype), (pred,), "masked_bce", grad_fn)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """
    Populate .grad of every tracked tensor with dLoss/dTensor.

    Leaf gradients accumulate, so optimizers zero them between steps. The
    tape is consumed: a second call on the same graph raises TapeError.

    Args:
        loss (Tensor): Scalar result of a recorded computation
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.astype(node.dtype) if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    for node in order:
        if node._parents:
            node._consumed = True
            node._backward = None
    logger.debug(f"backward through {len(order)} nodes")
