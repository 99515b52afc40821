"""Dense reverse-mode autodiff over numpy float64 arrays.

Each op records its parents and a closure that pushes the upstream gradient
back. `Tensor.backward()` walks the tape in reverse topological order; leaf
gradients accumulate across calls until an optimizer step zeroes them.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import ContractError, NumericError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable taping (eval-mode forward passes)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._prev: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = ""

    # -- basic properties -------------------------------------------------
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
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- differentiation --------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            if node._prev:
                node.grad = None
        seed = np.ones_like(self.data)
        if self._prev:
            self.grad = seed
        else:
            self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.requires_grad = False
        out.name = None
        out._prev = ()
        out._backward = None
        out._op = ""
        return out


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topological_order(root: Tensor) -> List[Tensor]:
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
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    out = Tensor._wrap(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
        out._op = op
    return out


# -- elementwise arithmetic ------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(g)

    return _result(a.data + b.data, (a, b), _backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(-g)

    return _result(a.data - b.data, (a, b), _backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), _backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g / b.data)
        b._accumulate(-g * a.data / (b.data * b.data))

    return _result(a.data / b.data, (a, b), _backward, "div")


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g * exponent * np.power(a.data, exponent - 1.0))

    return _result(np.power(a.data, exponent), (a,), _backward, "pow")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g * out_data)

    return _result(out_data, (a,), _backward, "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), _backward, "log")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g * mask)

    return _result(a.data * mask, (a,), _backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: ArrayLike) -> Tensor:
    """tanh approximation, as in BERT-style encoders."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def _backward(g: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner
        a._accumulate(g * local)

    return _result(out_data, (a,), _backward, "gelu")


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = _stable_sigmoid(a.data)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), _backward, "sigmoid")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- linear algebra and shape ops -----------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul shape mismatch", a.shape, b.shape)

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(np.matmul(a.data, b.data), (a, b), _backward, "matmul")


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g.reshape(original))

    return _result(a.data.reshape(tuple(shape)), (a,), _backward, "reshape")


def swapaxes(a: ArrayLike, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(np.swapaxes(g, axis1, axis2))

    return _result(np.swapaxes(a.data, axis1, axis2), (a,), _backward, "swapaxes")


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)

    basic = _is_basic_index(index)

    def _backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        a._accumulate(full)

    return _result(a.data[index], (a,), _backward, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def take_rows(a: ArrayLike, indices: np.ndarray) -> Tensor:
    """Gather along axis 0 with an index array of any shape."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)

    def _backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        a._accumulate(full)

    return _result(a.data[indices], (a,), _backward, "take_rows")


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def _backward(g: np.ndarray) -> None:
        for part, piece in zip(parts, np.split(g, bounds, axis=axis)):
            part._accumulate(piece)

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, _backward, "concat")


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    expanded = [reshape(p, np.expand_dims(p.data, axis).shape) for p in parts]
    return concat(expanded, axis=axis)


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(_expand_reduced(g, a.shape, axis, keepdims))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward, "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def _backward(g: np.ndarray) -> None:
        a._accumulate(_expand_reduced(g, a.shape, axis, keepdims) / count)

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), _backward, "mean")


def vector_norm(a: ArrayLike, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm; the gradient at the zero vector is taken as 0."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def _backward(g: np.ndarray) -> None:
        g_full = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(norm > 0, norm, 1.0)
        a._accumulate(np.where(norm > 0, g_full * a.data / safe, 0.0))

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return _result(out, (a,), _backward, "norm")


# -- normalisation, attention and losses ----------------------------------

def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax received NaN input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _backward(g: np.ndarray) -> None:
        a._accumulate(out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)))

    return _result(out_data, (a,), _backward, "softmax")


def softmax_rows(x: ArrayLike) -> Tensor:
    return softmax(x, axis=-1)


def layer_norm(x: ArrayLike, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    normed = centered * power(var + eps, -0.5)
    return normed * gamma + beta


def dropout(x: ArrayLike, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return x * keep


_PROB_FLOOR = 1e-12


def cross_entropy(pred: ArrayLike, target: np.ndarray) -> Tensor:
    """Mean over rows of -log pred[target], with pred clamped at 1e-12."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim != 2 or target.shape != pred.shape:
        raise ShapeError("cross_entropy rows mismatch", pred.shape, target.shape)
    n = pred.shape[0]
    picked = (pred.data * target).sum(axis=1)
    clamped = np.maximum(picked, _PROB_FLOOR)
    loss = float(-np.log(clamped).mean())

    def _backward(g: np.ndarray) -> None:
        active = (picked >= _PROB_FLOOR).astype(np.float64)
        coeff = -(active / clamped) / n
        pred._accumulate(g * coeff[:, None] * target)

    return _result(np.array(loss), (pred,), _backward, "cross_entropy")


def binary_cross_entropy_with_logits(logits: ArrayLike, labels: np.ndarray) -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ShapeError("bce shape mismatch", logits.shape, labels.shape)
    x = logits.data
    n = max(x.size, 1)
    loss = float((np.maximum(x, 0.0) - x * labels + np.log1p(np.exp(-np.abs(x)))).sum() / n)

    def _backward(g: np.ndarray) -> None:
        logits._accumulate(g * (_stable_sigmoid(x) - labels) / n)

    return _result(np.array(loss), (logits,), _backward, "bce_logits")


def mse_loss(pred: ArrayLike, target: ArrayLike) -> Tensor:
    diff = as_tensor(pred) - as_tensor(target)
    return mean(diff * diff)


# -- gradient checking ----------------------------------------------------

def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    rng: np.random.Generator,
    coords: int = 10,
    step: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` must be deterministic (eval mode, fixed inputs).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, grad in zip(params, analytic):
        if grad is None:
            grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        for idx in picks:
            original = flat[idx]
            flat[idx] = original + step
            with no_grad():
                plus = loss_fn().item()
            flat[idx] = original - step
            with no_grad():
                minus = loss_fn().item()
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = grad.reshape(-1)[idx]
            denom = max(abs(exact), abs(numeric), floor)
            worst = max(worst, abs(exact - numeric) / denom)
    for p in params:
        p.grad = None
    return worst
