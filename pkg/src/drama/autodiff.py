"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything trainable in this package (encoder backbones, adapters, gate
heads) lives in :class:`Tensor`. Operations record their backward rules on
the active :class:`Tape`; outside a tape context nothing is recorded, so
inference pays no bookkeeping cost.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericDomainError, ShapeError

LAYER_NORM_EPS = 1e-5

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array, optionally tracking a same-shape gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def checksum(self) -> bytes:
        """Exact byte-level fingerprint; used to assert frozen weights."""
        import hashlib

        return hashlib.sha256(self.data.tobytes()).digest()

    def __repr__(self) -> str:  # pragma: no cover
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is also a topological
    order: an operation can only consume tensors that already exist.
    ``backward`` walks the record once, in reverse.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise ContractError("nested tapes are not supported")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self.nodes.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of every trainable tensor reachable from loss."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)


_ACTIVE: Tape | None = None


def active_tape() -> Tape | None:
    return _ACTIVE


def backward(loss: Tensor) -> None:
    """Run the active tape backward from a scalar loss."""
    if _ACTIVE is None:
        raise ContractError("backward called with no active tape")
    _ACTIVE.backward(loss)


def _record(out: Tensor, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    if _ACTIVE is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE.record(out, fn)
    return out


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _record(out, (a, b), fn)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., k] @ w[k, n] (+ b[n]); the workhorse for all dense layers."""
    k = x.shape[-1]
    if w.data.ndim != 2 or w.shape[0] != k:
        raise ShapeError(f"affine shapes incompatible: {x.shape} x {w.shape}")
    x2 = x.data.reshape(-1, k)
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y.reshape(*x.shape[:-1], w.shape[1]))

    def fn(g: np.ndarray) -> None:
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            x.accumulate((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w.accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, fn)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over identical leading dimensions."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b.accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _record(out, (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _record(out, (a, b), fn)


def add_broadcast(x: Tensor, p: Tensor) -> Tensor:
    """x[B, ...] + p[...] with p broadcast over the leading batch axis."""
    if x.shape[1:] != p.shape:
        raise ShapeError(f"add_broadcast shapes incompatible: {x.shape} vs {p.shape}")
    out = Tensor(x.data + p.data[None])

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g)
        if p.requires_grad:
            p.accumulate(g.sum(axis=0))

    return _record(out, (x, p), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _record(out, (a, b), fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data / b.data)

    def fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g / b.data)
        if b.requires_grad:
            b.accumulate(-g * a.data / (b.data * b.data))

    return _record(out, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g * c)

    return _record(out, (x,), fn)


def shift(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + c)

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g)

    return _record(out, (x,), fn)


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(2.0 * g * x.data)

    return _record(out, (x,), fn)


def sqrt(x: Tensor) -> Tensor:
    root = np.sqrt(x.data)
    out = Tensor(root)

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g * 0.5 / root)

    return _record(out, (x,), fn)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g * (x.data > 0.0))

    return _record(out, (x,), fn)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = Tensor(x.data * phi)

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            x.accumulate(g * (phi + x.data * pdf))

    return _record(out, (x,), fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g.reshape(x.shape))

    return _record(out, (x,), fn)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)))
    inverse = tuple(np.argsort(axes))

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(np.transpose(g, inverse))

    return _record(out, (x,), fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather table[ids]; gradients scatter-add into the table."""
    out = Tensor(table.data[ids])

    def fn(g: np.ndarray) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _record(out, (table,), fn)


def softmax(x: Tensor, mask_add: np.ndarray | None = None) -> Tensor:
    """Probability-normalise the last axis, with max-subtraction for stability.

    ``mask_add`` is an optional constant bias (e.g. a large negative value at
    padded positions) broadcast-added to the inputs before normalising.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one entry")
    if not np.all(np.isfinite(x.data)):
        raise NumericDomainError("softmax input contains NaN or Inf")
    z = x.data if mask_add is None else x.data + mask_add
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * s).sum(axis=-1, keepdims=True)
            x.accumulate(s * (g - inner))

    return _record(out, (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    n = x.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm needs width >= 2, got {n}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm gain/bias must match the last axis")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def fn(g: np.ndarray) -> None:
        if bias.requires_grad:
            bias.accumulate(g.reshape(-1, n).sum(axis=0))
        if gain.requires_grad:
            gain.accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(term * inv)

    return _record(out, (x, gain, bias), fn)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.array(x.data.sum()))

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, float(g)))

    return _record(out, (x,), fn)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(np.expand_dims(g, axis).repeat(x.shape[axis], axis=axis))

    return _record(out, (x,), fn)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two rank-1 tensors."""
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    return sum_all(mul(a, b))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of x[B, L, D] over axis 1, restricted to mask[B, L] == 1."""
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("masked_mean saw a sequence with no valid positions")
    w = (mask / counts)[:, :, None]
    out = Tensor((x.data * w).sum(axis=1))

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g[:, None, :] * w)

    return _record(out, (x,), fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes], got {logits.shape}")
    n, _ = logits.shape
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logprobs = z - logsumexp
    out = Tensor(np.array(-logprobs[np.arange(n), labels].mean()))

    def fn(g: np.ndarray) -> None:
        if logits.requires_grad:
            probs = np.exp(logprobs)
            probs[np.arange(n), labels] -= 1.0
            logits.accumulate(float(g) * probs / n)

    return _record(out, (logits,), fn)


# ---------------------------------------------------------------------------
# parameter initialisation and optimisation


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int,
                 name: str = "", requires_grad: bool = True) -> Tensor:
    """Scaled-uniform init in +/- sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=requires_grad, name=name)


def zeros(shape: tuple[int, ...], name: str = "", requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def ones(shape: tuple[int, ...], name: str = "", requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, name=name)


class Adam:
    """Adaptive-moment optimiser over a fixed set of trainable tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update; gradients must be populated and are consumed."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise ContractError(f"optimizer_step: missing gradient on {p.name or 'a parameter'}")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
            p.grad = None


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            h: float = 1e-5) -> float:
    """Max relative disagreement between taped and central-difference gradients.

    ``f`` must rebuild its computation from the current parameter values on
    every call. Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [np.array(p.grad) if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = ana_flat[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
