"""Minimal reverse-mode autodiff over numpy arrays.

Only the primitives the vision tower and classifier head need are provided.
Every op validates shapes up front and refuses to produce non-finite values.
Leading batch axes are allowed wherever the math is per-row; there is no
general broadcasting engine beyond bias-style trailing-axis broadcasts.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, LabelError, NumericError, ParameterError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if arr.size and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {what}")


class Tensor:
    """Dense real array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = np.float64
        arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
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

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    _check_finite(data, "op output")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(out, (a,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_tanh(x: Tensor) -> Tensor:
    """0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))"""
    d = x.data
    c = np.asarray(_GELU_C, dtype=x.dtype)
    inner = c * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1 + t)

    def backward(g):
        dinner = c * (1 + 3 * 0.044715 * d**2)
        return (g * (0.5 * (1 + t) + 0.5 * d * (1 - t**2) * dinner),)

    return _result(out, (x,), backward)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def dropout(x: Tensor, p: float, train: bool, rng: "RngStream | None" = None) -> Tensor:
    """Inverted dropout. Eval mode returns ``x`` itself."""
    if not 0 <= p < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an RngStream")
    keep = rng.uniform(x.shape) >= p
    factor = (keep / (1.0 - p)).astype(x.dtype)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take_rows(x: Tensor, n: int) -> Tensor:
    """First ``n`` entries along axis 0."""
    if not 0 <= n <= x.shape[0]:
        raise DimensionError(f"cannot take {n} rows from {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:n] = g
        return (full,)

    return _result(x.data[:n], (x,), backward)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return scale(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c[..., i, j] = Σ_t a[..., i, t]·b[..., t, j]; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batch extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x·Wᵀ + b over the last axis; ``weight`` is [out, in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        grads = [g @ weight.data, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out, parents, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per last-axis slice: gamma·(x − mean)/sqrt(var + eps) + beta, biased variance."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma/beta must have shape ({d},)")
    if eps <= 0:
        raise ParameterError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _result(out.astype(x.dtype), (x, gamma, beta), backward)


def multi_head_attention(x: Tensor, params: dict[str, Tensor], num_heads: int) -> Tensor:
    """Unmasked multi-head self-attention over the token axis of ``x`` [..., N, D].

    ``params`` holds ``q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b`` with every
    weight mapping D→D.
    """
    d = x.shape[-1]
    if num_heads < 1 or d % num_heads:
        raise ConfigurationError(f"embed dim {d} not divisible by {num_heads} heads")
    n = x.shape[-2]
    lead = x.shape[:-2]
    dh = d // num_heads

    def heads(t: Tensor) -> Tensor:
        t = reshape(t, (*lead, n, num_heads, dh))
        k = len(lead)
        return transpose(t, (*range(k), k + 1, k, k + 2))

    q = heads(linear(x, params["q_w"], params["q_b"]))
    k = heads(linear(x, params["k_w"], params["k_b"]))
    v = heads(linear(x, params["v_w"], params["v_b"]))
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(dh))
    ctx = matmul(softmax(scores, axis=-1), v)
    nl = len(lead)
    ctx = transpose(ctx, (*range(nl), nl + 1, nl, nl + 2))
    ctx = reshape(ctx, (*lead, n, d))
    return linear(ctx, params["o_w"], params["o_b"])


# ---------------------------------------------------------------- losses


def bce_loss(p: Tensor, y, pos_weight: float = 1.0, eps: float = 1e-7) -> Tensor:
    """Mean of −[w·y·log p + (1−y)·log(1−p)] with p clamped to [eps, 1−eps]."""
    y = np.asarray(y, dtype=p.dtype)
    if not np.isin(y, (0, 1)).all():
        raise LabelError("labels must be 0 or 1")
    if y.shape != p.shape:
        raise DimensionError(f"labels {y.shape} vs probabilities {p.shape}")
    pc = clip(p, eps, 1 - eps)
    pos = mul(log(pc), y * pos_weight)
    negt = mul(log(1.0 - pc), 1 - y)
    return scale(mean(add(pos, negt)), -1.0)


# ---------------------------------------------------------------- rng


class RngStream:
    """Counter-based random stream.

    Draw number ``counter`` under ``seed`` always produces the same values:
    each draw runs a fresh Philox generator keyed by ``seed`` with the draw
    index in the high counter word, then bumps ``counter``.
    """

    def __init__(self, seed: int, counter: int = 0):
        if not 0 <= seed < 2**64:
            raise ParameterError("seed must fit in 64 bits")
        self.seed = int(seed)
        self.counter = int(counter)

    def state(self) -> tuple[int, int]:
        return self.seed, self.counter

    def _next(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter << 192))
        self.counter += 1
        return gen

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._next().uniform(low, high, size=shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._next().normal(0.0, std, size=shape)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) resampled until every value lies within ±bound·std."""
        gen = self._next()
        out = gen.normal(0.0, 1.0, size=shape)
        bad = (out > bound) | (out < -bound)
        while bad.any():
            out[bad] = gen.normal(0.0, 1.0, size=int(bad.sum()))
            bad = (out > bound) | (out < -bound)
        out *= std
        return out

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def substream(self, *keys: int) -> "RngStream":
        """Independent stream derived from (seed, *keys); does not advance this one."""
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        return RngStream(int(ss.generate_state(1, np.uint64)[0]))


# ---------------------------------------------------------------- checking


def grad_check(fn: Callable[[], Tensor], tensors: Iterable[Tensor], step: float = 1e-4,
               max_per_tensor: int | None = None, rng: RngStream | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must return a scalar tensor built from ``tensors``. The error per
    element is |analytic − numeric| / max(1, |numeric|). With
    ``max_per_tensor`` set, larger tensors are probed at that many elements
    drawn from ``rng`` instead of exhaustively.
    """
    tensors = list(tensors)
    for t in tensors:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = fn()
    if out.size != 1:
        raise DimensionError("grad_check needs a scalar-valued closure")
    out.backward()
    worst = 0.0
    with no_grad():
        for t in tensors:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            aflat = analytic.reshape(-1)
            indices = range(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                indices = (rng or RngStream(0)).permutation(flat.size)[:max_per_tensor]
            for i in indices:
                orig = flat[i]
                flat[i] = orig + step
                fp = fn().item()
                flat[i] = orig - step
                fm = fn().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * step)
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError("non-finite value during finite differencing")
                worst = max(worst, abs(aflat[i] - numeric) / max(1.0, abs(numeric)))
    return worst
