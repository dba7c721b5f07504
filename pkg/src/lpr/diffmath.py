"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the operations the LPR graph needs are provided. Every op works on
numpy arrays, records its parents and a closure that pushes the upstream
gradient back, and refuses to emit non-finite values.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by exp(-log) instead")
        return mul(self, 1.0 / float(other))

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


class Parameter(Tensor):
    """A leaf tensor owned by a model; gradient always allocated."""

    __slots__ = ("trainable",)

    def __init__(self, data, name=None, trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # _make reports the overflow
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _make(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),), "mean")


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]`` (used to select candidate prototypes)."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward, "take_rows")


# ---------------------------------------------------------------------------
# row-wise ops; rank-1 inputs are treated as a single row


def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(1, -1) if x.ndim == 1 else x


def softmax(logits) -> Tensor:
    """Row-wise softmax with max subtraction."""
    logits = as_tensor(logits)
    if logits.data.size == 0 or logits.shape[-1] == 0:
        raise ValueError("empty distribution")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), backward, "softmax")


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    if logits.data.size == 0 or logits.shape[-1] == 0:
        raise ValueError("empty distribution")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), backward, "log_softmax")


def cross_entropy(logits, target) -> Tensor:
    """Mean negative log-likelihood of ``target`` under softmax(logits).

    A rank-1 ``logits`` with an integer ``target`` gives the single-sample
    loss; a (B, n) batch with B targets gives the batch mean.
    """
    logits = as_tensor(logits)
    if logits.data.size == 0:
        raise ValueError("empty distribution")
    rows = _rows(logits.data)
    targets = np.atleast_1d(np.asarray(target))
    if not np.issubdtype(targets.dtype, np.integer):
        raise TypeError("cross_entropy targets must be integer class indices")
    n_rows, n_cls = rows.shape
    if targets.shape != (n_rows,):
        raise ValueError(f"expected {n_rows} targets, got {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= n_cls):
        bad = targets[(targets < 0) | (targets >= n_cls)][0]
        raise IndexError(f"target {int(bad)} out of range for {n_cls} classes")
    z = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n_rows), targets]
    loss = float(np.mean(lse - picked))
    shape = logits.shape

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n_rows), targets] -= 1.0
        return ((g / n_rows) * p.reshape(shape),)

    return _make(np.array(loss), (logits,), backward, "cross_entropy")


def normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale every row to unit L2 norm; a zero row is an error."""
    x = as_tensor(x)
    rows = _rows(x.data)
    norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    if np.any(norms <= eps):
        raise ValueError("degenerate feature: zero-norm vector cannot be normalized")
    y = rows / norms
    shape = x.shape

    def backward(g):
        g = _rows(g)
        return (((g - y * (g * y).sum(axis=1, keepdims=True)) / norms).reshape(shape),)

    return _make(y.reshape(shape), (x,), backward, "normalize")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation followed by an affine gain/bias."""
    x = as_tensor(x)
    rows = _rows(x.data)
    mu = rows.mean(axis=1, keepdims=True)
    xc = rows - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    shape = x.shape

    def backward(g):
        g = _rows(g)
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx.reshape(shape), dgain.reshape(gain.shape), dbias.reshape(bias.shape)

    return _make(out.reshape(shape), (x, gain, bias), backward, "layer_norm")


def cosine_sim_matrix(X, Y) -> Tensor:
    """Pairwise cosine similarity between the rows of X (m, d) and Y (n, d)."""
    X, Y = as_tensor(X), as_tensor(Y)
    xn = normalize(X if X.ndim == 2 else reshape(X, (1, -1)))
    yn = normalize(Y if Y.ndim == 2 else reshape(Y, (1, -1)))
    return matmul(xn, transpose(yn))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# verification and optimisation


def grad_check(fn: Callable[[], Tensor], param: Parameter, h: float = 1e-5, indices=None) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` rebuilds the graph from scratch on every call and must return a
    scalar. The error per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    ``indices`` optionally restricts the check to a subset of flat entries.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    param.grad = np.zeros_like(param.data)
    out = fn()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued graph, got shape {out.shape}")
    out.backward()
    analytic = param.grad.reshape(-1).copy()
    flat = param.data.reshape(-1)
    picks = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn().data)
            flat[i] = orig - h
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    param.zero_grad()
    return worst


class AdamW:
    """Adaptive-moment optimiser with decoupled weight decay.

    Non-trainable parameters are skipped entirely (no moment, no decay).
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 5e-4,
        betas: Sequence[float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if p.trainable and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"diverged: non-finite gradient in {p.name or 'parameter'}")
        t = self.step_count + 1
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        staged = []
        with np.errstate(over="ignore", invalid="ignore"):
            for i, p in enumerate(self.params):
                if not p.trainable:
                    continue
                g = p.grad
                m = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
                v = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
                data = p.data - self.lr * self.weight_decay * p.data
                data = data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if not (finite(m) and finite(v) and finite(data)):
                    raise FloatingPointError(f"diverged: update of {p.name or 'parameter'} overflowed")
                staged.append((i, p, m, v, data))
        # commit only once every update is known to be finite
        for i, p, m, v, data in staged:
            self.m[i][...] = m
            self.v[i][...] = v
            p.data = data
        self.step_count = t


def finite(x) -> bool:
    return bool(np.all(np.isfinite(np.asarray(x))))


def fan_in_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
