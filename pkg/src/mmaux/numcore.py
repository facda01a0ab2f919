"""Dense float64 tensors with reverse-mode differentiation.

Only what a small transformer needs: broadcasting arithmetic, batched matmul,
row softmax, layer norm, multi-head attention, gathers and concatenation.
Every op records a closure that pushes its output gradient back to its
inputs; ``Tensor.backward`` runs those closures in reverse topological order.

Also hosts the Adam update and a central-difference gradient checker, which
is the oracle every parameterized module in the package is tested against.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, GradCheckError, InputError

_MASK_FILL = -1e30

_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accum(t: "Tensor", g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        if _backward is not None and grad_enabled():
            self._parents = _parents
            self._backward = _backward
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf reachable from self.

        Leaves (params and plain inputs) accumulate across calls; interior
        nodes are reset so re-running backward on a fresh graph is clean.
        """
        order = []
        seen = set()
        stack = [(self, False)]
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
        for node in order:
            if node._backward is not None:
                node.grad = None
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        _accum(self, seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Param(Tensor):
    """A named leaf tensor whose gradient is always allocated."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return Tensor(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def backward(g):
        _accum(a, -g * out * out)

    return Tensor(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return Tensor(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return Tensor(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out)

    return Tensor(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return Tensor(out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, so finite differences behave)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _accum(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner))

    return Tensor(out, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accum(a, g * inside)

    return Tensor(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape and reduction


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return Tensor(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return Tensor(a.data.transpose(axes), (a,), backward)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return Tensor(a.data[idx], (a,), backward)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather along axis 0 with an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return Tensor(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading dims broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # (..., n) @ (n, m): fold the batch dims so BLAS sees one large GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            _accum(a, (g2 @ b.data.T).reshape(a.shape))
            _accum(b, a2.T @ g2)

        return Tensor(out, (a, b), backward)

    def backward(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return Tensor(np.matmul(a.data, b.data), (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# normalizers


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return Tensor(s, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        _accum(x, g - s * g.sum(axis=-1, keepdims=True))

    return Tensor(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    d = x.shape[-1]
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise DimensionError(f"layer_norm width {d} does not match gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        _accum(x, dx)
        _accum(gain, _unbroadcast(g * xhat, gain.shape))
        _accum(bias, _unbroadcast(g, bias.shape))

    return Tensor(out, (x, gain, bias), backward)


def normalize_rows(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Divide each row (last axis) by its Euclidean norm."""
    from .errors import NumericDegeneracyError

    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norms < min_norm):
        raise NumericDegeneracyError("cannot normalize a zero row")
    out = x.data / norms

    def backward(g):
        _accum(x, (g - out * (g * out).sum(axis=-1, keepdims=True)) / norms)

    return Tensor(out, (x,), backward)


# ---------------------------------------------------------------------------
# attention


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, n, d = t.shape
    t = reshape(t, tuple(lead) + (n, heads, d // heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return transpose(t, tuple(axes))


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, n, dh = t.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    t = transpose(t, tuple(axes))
    return reshape(t, tuple(lead) + (n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask=None, scale: float | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    q is (..., Tq, d); k and v are (..., Tk, d). ``key_mask`` is a boolean
    array broadcastable to (..., Tk) where False marks keys to ignore.
    No projections are applied here; callers own their Q/K/V/O weights.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise DimensionError("attention operands must be at least rank 2")
    d = q.shape[-1]
    if heads < 1 or d % heads != 0:
        raise ConfigError(f"model dimension {d} is not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError(f"q/k/v widths differ: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("k and v must have the same number of rows")
    if scale is None:
        scale = 1.0 / math.sqrt(d // heads)

    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = matmul(qh, swap_last(kh)) * scale
    if key_mask is not None:
        m = np.asarray(key_mask, dtype=bool)
        # (..., Tk) -> (..., 1, 1, Tk) to broadcast over heads and queries
        bias = np.where(m, 0.0, _MASK_FILL)[..., None, None, :]
        scores = add(scores, Tensor(bias))
    weights = softmax_rows(scores)
    return _merge_heads(matmul(weights, vh))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: Sequence[Param], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Gradients are left as-is."""
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise InputError("adam_step needs uniquely named params")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        m = state.first_moment.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.second_moment[p.name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[p.name] = m
        state.second_moment[p.name] = v
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    n_coords: int
    worst_param: str = ""
    worst_index: tuple = ()
    per_param: dict = field(default_factory=dict)

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_rel_err:.3e} (tol {self.tol:g}, {self.n_coords} coords, worst {self.worst_param}{list(self.worst_index)})"


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-6,
    grad_transform: Callable[[np.ndarray], np.ndarray] | None = None,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of the scalar ``f()`` against central differences.

    Every coordinate of every tensor in ``params`` is perturbed. Relative
    error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    ``grad_transform`` rewrites the analytic gradient before comparison
    (used to inject faults in negative controls).
    """
    if not (0.0 < eps <= 1e-3):
        raise ConfigError(f"finite-difference step must lie in (0, 1e-3], got {eps}")
    if names is None:
        names = [getattr(p, "name", "") or f"arg{i}" for i, p in enumerate(params)]

    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("loss is not finite")
    loss.backward()
    analytic = [np.array(p.grad, copy=True) for p in params]
    if grad_transform is not None:
        analytic = [grad_transform(a) for a in analytic]

    worst = (0.0, "", ())
    per_param = {}
    n_coords = 0
    with no_grad():
        for p, a, name in zip(params, analytic, names):
            flat = p.data.reshape(-1)
            a_flat = a.reshape(-1)
            p_worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise GradCheckError(f"non-finite loss while perturbing {name}")
                num = (up - down) / (2.0 * eps)
                err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), abs_floor)
                n_coords += 1
                if err > p_worst:
                    p_worst = err
                if err > worst[0]:
                    worst = (err, name, np.unravel_index(i, p.shape))
            per_param[name] = p_worst
    return GradCheckReport(
        max_rel_err=worst[0],
        passed=worst[0] < tol,
        tol=tol,
        n_coords=n_coords,
        worst_param=worst[1],
        worst_index=tuple(int(j) for j in worst[2]),
        per_param=per_param,
    )
