"""Minimal reverse-mode differentiation over dense numpy arrays.

Supplies exactly the operations the model needs: linear maps, elementwise
arithmetic and activations, softmax, batch norm, segment reductions, and
trigonometric features.  Gradients are accumulated (calling ``backward``
twice without zeroing doubles them), and ``grad_check`` verifies any
differentiable function against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NondeterministicFunction, ShapeError


class Tensor:
    """A node in the computation graph: value, gradient slot, provenance.

    ``grad`` has the same shape as ``data`` and starts at zero.  Shapes are
    fixed at creation.  Graphs are built eagerly; ``backward`` walks them in
    reverse topological order, visiting each node exactly once.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        arr = np.asarray(data)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``grad`` of every reachable node.

        ``self`` must be scalar.  Gradients are computed into a scratch map
        and added to ``grad`` at the end, so repeated calls accumulate.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")

        topo: List[Tensor] = []
        done = set()
        expanded = set()
        stack = [(self, False)]
        while stack:
            node, children_done = stack.pop()
            if id(node) in done:
                continue
            if children_done:
                done.add(id(node))
                topo.append(node)
                continue
            if id(node) in expanded:
                continue
            expanded.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in done and p.requires_grad:
                    stack.append((p, False))

        grads: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad += g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar ----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Parameter:
    """A named, trainable graph leaf."""

    value: Tensor
    name: str
    trainable: bool = True


ParamDict = Dict[str, Parameter]


def parameter(data, name: str, trainable: bool = True) -> Parameter:
    return Parameter(Tensor(data, requires_grad=trainable), name, trainable)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _elementwise(a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc

    def backward_fn(g):
        return (
            _unbroadcast(da(g, a.data, b.data), a.shape),
            _unbroadcast(db(g, a.data, b.data), b.shape),
        )

    return Tensor(out, a.requires_grad or b.requires_grad, (a, b), backward_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _elementwise(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _elementwise(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _elementwise(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _elementwise(
        a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n,k) @ (k,m), got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, a.requires_grad or b.requires_grad, (a, b), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias, with weight shaped (fan_in, fan_out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concat shapes {[t.shape for t in tensors]}") from exc
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return np.split(g, splits, axis=axis)

    return Tensor(out, any(t.requires_grad for t in tensors), tuple(tensors), backward_fn)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows of x (axis 0); backward scatter-adds into the source."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"row index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for {x.shape[0]} rows")
    out = x.data[idx]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor(out, x.requires_grad, (x,), backward_fn)


def _check_segments(segments: np.ndarray, num_segments: int) -> np.ndarray:
    seg = np.asarray(segments, dtype=np.int64)
    if seg.ndim != 1:
        raise ShapeError(f"segment ids must be 1-D, got shape {seg.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise IndexError(f"segment id out of range [0, {num_segments})")
    return seg


def segment_sum(x: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows of x into ``num_segments`` buckets by segment id."""
    x = _as_tensor(x)
    seg = _check_segments(segments, num_segments)
    if x.data.ndim != 2 or seg.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_sum needs (n,d) values with n ids, got {x.shape}")
    out = np.zeros((num_segments, x.shape[1]), dtype=x.data.dtype)
    np.add.at(out, seg, x.data)

    def backward_fn(g):
        return (g[seg],)

    return Tensor(out, x.requires_grad, (x,), backward_fn)


def segment_mean(x: Tensor, segments, num_segments: int) -> Tensor:
    """Mean of rows per segment; empty segments produce zero rows."""
    x = _as_tensor(x)
    seg = _check_segments(segments, num_segments)
    if x.data.ndim != 2 or seg.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_mean needs (n,d) values with n ids, got {x.shape}")
    counts = np.bincount(seg, minlength=num_segments).astype(x.data.dtype)
    denom = np.maximum(counts, 1.0)[:, None]
    out = np.zeros((num_segments, x.shape[1]), dtype=x.data.dtype)
    np.add.at(out, seg, x.data)
    out /= denom

    def backward_fn(g):
        return ((g / denom)[seg],)

    return Tensor(out, x.requires_grad, (x,), backward_fn)


def _unary(x: Tensor, out_data: np.ndarray, grad_fn) -> Tensor:
    def backward_fn(g):
        return (grad_fn(g),)

    return Tensor(out_data, x.requires_grad, (x,), backward_fn)


def _sigmoid_data(data: np.ndarray) -> np.ndarray:
    bound = 80.0 if data.dtype == np.float32 else 700.0  # keep exp in range
    return 1.0 / (1.0 + np.exp(-np.clip(data, -bound, bound)))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _unary(x, out, lambda g: g * (x.data > 0))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_data(x.data)
    return _unary(x, s, lambda g: g * s * (1.0 - s))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    out = np.logaddexp(np.asarray(0.0, dtype=x.data.dtype), x.data)
    s = _sigmoid_data(x.data)
    return _unary(x, out, lambda g: g * s)


def silu(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_data(x.data)
    return _unary(x, x.data * s, lambda g: g * (s + x.data * s * (1.0 - s)))


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return _unary(x, y, lambda g: y * (g - (g * y).sum(axis=-1, keepdims=True)))


def cos(x) -> Tensor:
    x = _as_tensor(x)
    return _unary(x, np.cos(x.data), lambda g: -g * np.sin(x.data))


def sin(x) -> Tensor:
    x = _as_tensor(x)
    return _unary(x, np.sin(x.data), lambda g: g * np.cos(x.data))


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    return _unary(x, np.abs(x.data), lambda g: g * np.sign(x.data))


def power(x, exponent: float) -> Tensor:
    x = _as_tensor(x)
    out = np.power(x.data, exponent)
    return _unary(x, out, lambda g: g * exponent * np.power(x.data, exponent - 1.0))


def tsum(x, axis: Optional[int] = None) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return np.broadcast_to(g, x.shape).astype(x.data.dtype)
        return np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.data.dtype)

    return _unary(x, out, grad_fn)


def tmean(x, axis: Optional[int] = None) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis)
    count = x.data.size if axis is None else x.shape[axis]

    def grad_fn(g):
        if axis is None:
            return np.broadcast_to(g / count, x.shape).astype(x.data.dtype)
        return np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).astype(x.data.dtype)

    return _unary(x, out, grad_fn)


@dataclass
class BatchNormState:
    """Running statistics and settings for one batch-norm site."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches: int = 0

    @classmethod
    def create(cls, width: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(width, dtype=np.float64),
            running_var=np.ones(width, dtype=np.float64),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool
) -> Tensor:
    """Batch normalization over axis 0 with affine terms.

    Training mode normalizes by batch statistics (built from primitive ops,
    so gradients through the statistics are exact) and updates the running
    estimates; eval mode uses frozen running statistics.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != state.running_mean.shape[0]:
        raise ShapeError(f"batch_norm expects (n, {state.running_mean.shape[0]}), got {x.shape}")
    if training:
        m = tmean(x, axis=0)
        centered = sub(x, m)
        var = tmean(mul(centered, centered), axis=0)
        inv_std = power(add(var, state.eps), -0.5)
        n = x.shape[0]
        unbiased = var.data * (n / (n - 1.0)) if n > 1 else var.data
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * m.data
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
        state.num_batches += 1
        normed = mul(centered, inv_std)
    else:
        dt = x.data.dtype
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(dt, copy=False)
        normed = mul(sub(x, state.running_mean.astype(dt, copy=False)), inv)
    return add(mul(normed, gamma), beta)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.value.zero_grad()


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    max_entries_per_param: int = 16,
    seed: int = 0,
    atol: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic (it is evaluated repeatedly); a sampled
    subset of entries per parameter keeps large checks tractable.  The
    error is |analytic - numeric| / (|numeric| + 1e-12); when the absolute
    difference is under ``atol`` the two are indistinguishable from zero at
    float64 finite-difference noise and the entry counts as exact.
    """
    base = f().item()
    if f().item() != base:
        raise NondeterministicFunction("function value changed between identical calls")

    zero_grads(params)
    f().backward()
    analytic = {p.name: p.value.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        size = p.value.data.size
        if size <= max_entries_per_param:
            entries = np.arange(size)
        else:
            entries = rng.choice(size, size=max_entries_per_param, replace=False)
        for i in entries:
            idx = np.unravel_index(i, p.value.data.shape)
            orig = p.value.data[idx]
            p.value.data[idx] = orig + eps
            up = f().item()
            p.value.data[idx] = orig - eps
            down = f().item()
            p.value.data[idx] = orig
            numeric = (up - down) / (2.0 * eps)
            diff = abs(analytic[p.name][idx] - numeric)
            if diff < atol:
                continue
            worst = max(worst, diff / (abs(numeric) + 1e-12))
    return worst
