"""Small reverse-mode autodiff over numpy arrays.

Just enough for the two equalizers and the quantization-aware training
strategies: elementwise arithmetic with broadcasting, matmul, tanh/sigmoid,
concatenation, slicing, a same-padded 1-D convolution, and custom-gradient
nodes. Everything runs in float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(FloatingPointError):
    """A NaN or Inf appeared in a forward or backward pass."""


# --------------------------------------------------------------------------
# Multiplication counter
# --------------------------------------------------------------------------

class MultCounter:
    def __init__(self):
        self.count = 0


_counters: list[MultCounter] = []


@contextlib.contextmanager
def count_mults():
    """Count real multiplications performed by tensor ops inside the block.

    Matmul counts m*k*n, convolution counts output length times taps, and an
    elementwise product of two tensors counts one per output element. Scalar
    scaling, additions and activations are not counted.
    """
    c = MultCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


def _tally(n: int) -> None:
    for c in _counters:
        c.count += int(n)


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- basics ----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- graph -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen = set()

        def visit(t):
            # iterative DFS; LSTM graphs get deep enough to hit the recursion limit
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient in backward pass")
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor(self.data + other.data, _parents=(self, other),
                      _backward=lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _tally(np.broadcast(self.data, other.data).size)
        other = as_tensor(other)
        x, y = self.data, other.data
        a, b = self.shape, other.shape
        return Tensor(x * y, _parents=(self, other),
                      _backward=lambda g: (_unbroadcast(g * y, a), _unbroadcast(g * x, b)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1
        return self * (1.0 / other)

    def __pow__(self, p: float):
        x = self.data
        return Tensor(x**p, _parents=(self,), _backward=lambda g: (g * p * x ** (p - 1),))

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        if x.shape[-1] != y.shape[0] or y.ndim != 2:
            raise ShapeError(f"matmul shapes {x.shape} @ {y.shape}")
        _tally(x.size * y.shape[1])

        def back(g):
            gx = g @ y.T
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return gx, gy

        return Tensor(x @ y, _parents=(self, other), _backward=back)

    # -- shape ops -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _backward=back)

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.data.reshape(*shape), _parents=(self,), _backward=lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor(self.data.transpose(axes), _parents=(self,), _backward=lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        shape = self.shape

        basic = isinstance(idx, (slice, int)) or (
            isinstance(idx, tuple) and all(isinstance(i, (slice, int)) or i is Ellipsis for i in idx))

        def back(g):
            out = np.zeros(shape)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return Tensor(self.data[idx], _parents=(self,), _backward=back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Functions
# --------------------------------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor(y, _parents=(x,), _backward=lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1 + np.tanh(0.5 * x.data))
    return Tensor(y, _parents=(x,), _backward=lambda g: (g * y * (1 - y),))


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors), _backward=back)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor(np.stack([t.data for t in tensors], axis=axis), _parents=tuple(tensors), _backward=back)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "none": lambda x: x,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def dense_forward(x: Tensor, W: Tensor, b: Tensor, activation: str = "none") -> Tensor:
    """act(x W^T + b) over the last axis of ``x``; ``W`` has shape (n_o, n_i)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: x {x.shape}, W {W.shape}, b {b.shape}")
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    return act(x @ W.T + b)


def conv1d_same(x: Tensor, h: Tensor) -> Tensor:
    """Stride-1 correlation with zero "same" padding along the last axis.

    y[t] = sum_k h[k] x[t + k - (K-1)//2]; leading axes of ``x`` are batch axes.
    """
    x, h = as_tensor(x), as_tensor(h)
    if h.ndim != 1:
        raise ShapeError("kernel must be 1-D")
    K, L = h.shape[0], x.shape[-1]
    if K > L:
        raise ShapeError(f"kernel length {K} exceeds input length {L}")
    left = (K - 1) // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(left, K - 1 - left)]
    xp = np.pad(x.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=-1)  # (..., L, K)
    hk = h.data
    _tally(x.size * K)

    def back(g):
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[..., k:k + L] += g * hk[k]
        gx = gxp[..., left:left + L]
        gh = np.tensordot(g, win, axes=g.ndim)
        return gx, gh

    return Tensor(win @ hk, _parents=(x, h), _backward=back)


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred.data - np.asarray(target, dtype=np.float64)
    n = diff.size
    return Tensor(np.mean(diff * diff), _parents=(pred,), _backward=lambda g: (g * 2.0 * diff / n,))


class CustomGradientNode:
    """Pairs a forward map with a hand-written backward rule.

    ``forward(x) -> y`` and ``backward(x, g) -> dL/dx`` both act on numpy
    arrays; the backward output must have the shape of ``x``.
    """

    def __init__(self, forward: Callable[[np.ndarray], np.ndarray],
                 backward: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        self.forward = forward
        self.backward = backward

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        xd = x.data
        y = np.asarray(self.forward(xd), dtype=np.float64)
        if y.shape != xd.shape:
            raise ShapeError("custom forward must preserve shape")

        def back(g):
            gx = np.asarray(self.backward(xd, g), dtype=np.float64)
            if gx.shape != xd.shape:
                raise ShapeError("custom backward must return the input shape")
            return (gx,)

        return Tensor(y, _parents=(x,), _backward=back)


# --------------------------------------------------------------------------
# Parameters and optimizer
# --------------------------------------------------------------------------

@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = None
    trainable: bool = True
    # True freezes the whole tensor; a boolean array freezes selected entries
    frozen: bool | np.ndarray = False

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def frozen_mask(self) -> np.ndarray:
        if isinstance(self.frozen, np.ndarray):
            return self.frozen
        return np.full(self.value.shape, bool(self.frozen))


@dataclass
class ParameterStore:
    params: dict[str, Parameter] = field(default_factory=dict)

    def add(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Parameter(np.array(value, dtype=np.float64), trainable=trainable)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def leaves(self) -> dict[str, Tensor]:
        """Fresh graph leaves for one forward pass."""
        return {n: Tensor(p.value, requires_grad=p.trainable) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.value)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            self.params[n].value = np.array(v, dtype=np.float64).reshape(self.params[n].value.shape)

    def unfreeze_all(self) -> None:
        for p in self.params.values():
            p.frozen = False


def grad(loss: Tensor, leaves: dict[str, Tensor], store: ParameterStore) -> None:
    """Back-propagate ``loss`` and write gradients into ``store``.

    Parameters the loss does not reach get a zero gradient.
    """
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss")
    for t in leaves.values():
        t.grad = None
    loss.backward()
    for name, t in leaves.items():
        p = store[name]
        p.grad = np.zeros_like(p.value) if t.grad is None else t.grad


class Adam:
    def __init__(self, store: ParameterStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in store.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for n, p in self.store.items():
            if not p.trainable:
                continue
            mask = p.frozen_mask()
            if mask.all():
                continue
            g = np.where(mask, 0.0, p.grad)
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.value = np.where(mask, p.value, p.value - upd)


def adam_step(store: ParameterStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
              state: Adam | None = None) -> Adam:
    """One Adam update; pass the returned state back in to continue a run."""
    opt = state or Adam(store, lr, betas, eps)
    opt.step()
    return opt


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_out, fan_in))
