"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Everything trainable in this package (encoders, the graph decoder, the
downstream predictors, even the linear-SEM baseline objective) is expressed
with the `Tensor` ops below.  A `Tape` records operations in creation order,
which is already a valid topological order, so the backward sweep is a single
reversed pass.  There is no broadcasting beyond the cases the models need:
scalars (1, 1), row vectors (1, n) and column vectors (n, 1) against full
matrices.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "obsim_active_tape", default=None
)


class Tensor:
    """A 2-D float64 array plus the bookkeeping needed for backward().

    Scalars are stored as (1, 1) and 1-D input is promoted to a row vector.
    The shape is fixed at creation; only leaf parameters ever have their
    values rewritten (in place, by the optimizer).
    """

    __slots__ = ("value", "requires_grad", "grad", "name", "_parents", "_backward_fn")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-D; got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.value = np.array(arr, dtype=np.float64)  # own the buffer
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @classmethod
    def _result(cls, value: np.ndarray, parents: tuple["Tensor", ...], backward_fn):
        """Internal constructor for op outputs; skips validation and copies."""
        out = cls.__new__(cls)
        out.value = value
        out.grad = None
        out.name = None
        tape = _ACTIVE_TAPE.get()
        if tape is not None and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
            tape._record(out)
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.value[0, 0])

    def _accumulate(self, g: np.ndarray) -> None:
        # Copy on first write: g may alias a child's grad buffer.
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # Operator sugar.  Plain numbers and arrays lift to constant tensors.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class Tape:
    """Records op outputs in creation order while active as a context manager."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._params: list[Tensor] = []
        self._param_ids: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def _record(self, node: Tensor) -> None:
        self._nodes.append(node)
        for p in node._parents:
            if p._backward_fn is None and p.requires_grad and id(p) not in self._param_ids:
                self._param_ids.add(id(p))
                self._params.append(p)

    def watch(self, param: Tensor) -> None:
        """Register a leaf so backward() reports a gradient even if unused."""
        if not param.requires_grad:
            raise ValueError("watch() expects a tensor with requires_grad=True")
        if id(param) not in self._param_ids:
            self._param_ids.add(id(param))
            self._params.append(param)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Return d(loss)/d(param) for every leaf touched on (or watched by) the tape.

    The loss must be scalar.  Leaves registered on the tape but unreachable
    from the loss get exact zero gradients.  Values stored on the tape are
    never mutated, so a tape can be swept repeatedly.
    """
    if loss.value.shape != (1, 1):
        raise ValueError(f"loss must be scalar (1, 1); got shape {loss.value.shape}")
    for node in tape._nodes:
        node.grad = None
    for p in tape._params:
        p.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(tape._nodes):
        if node.grad is None or node._backward_fn is None:
            continue
        node._backward_fn(node.grad)
    grads = {
        p: (p.grad if p.grad is not None else np.zeros_like(p.value))
        for p in tape._params
    }
    for node in tape._nodes:
        node.grad = None
    for p in tape._params:
        p.grad = None
    return grads


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum g down to `shape`, undoing (1, n) / (n, 1) / (1, 1) broadcasting."""
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.value + b.value

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    return Tensor._result(val, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.value - b.value

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.value.shape))

    return Tensor._result(val, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.value * b.value

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    return Tensor._result(val, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.value == 0.0):
        raise ValueError("division by zero")
    val = a.value / b.value

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * val / b.value, b.value.shape))

    return Tensor._result(val, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(-g)

    return Tensor._result(-a.value, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    val = a.value @ b.value

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return Tensor._result(val, (a, b), bwd)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)
    if exponent != int(exponent) and np.any(a.value < 0.0):
        raise ValueError("fractional power of negative values")
    val = a.value**exponent

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.value ** (exponent - 1.0))

    return Tensor._result(val, (a,), bwd)


def square(a) -> Tensor:
    a = _as_tensor(a)
    val = a.value * a.value

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * 2.0 * a.value)

    return Tensor._result(val, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    val = np.exp(a.value)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * val)

    return Tensor._result(val, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.value <= 0.0):
        raise ValueError("log needs strictly positive input")
    val = np.log(a.value)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.value)

    return Tensor._result(val, (a,), bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    val = np.tanh(a.value)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - val * val))

    return Tensor._result(val, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.value
    val = np.empty_like(x)
    pos = x >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    val[~pos] = ex / (1.0 + ex)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * val * (1.0 - val))

    return Tensor._result(val, (a,), bwd)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.value
    val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        if a.requires_grad:
            s = np.empty_like(x)
            pos = x >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            s[~pos] = ex / (1.0 + ex)
            a._accumulate(g * s)

    return Tensor._result(val, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and reshaping


def tsum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        val = np.array([[a.value.sum()]])
    else:
        val = a.value.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.value.shape))

    return Tensor._result(val, (a,), bwd)


def tmean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)


def transpose(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return Tensor._result(a.value.T.copy(), (a,), bwd)


def reshape(a, shape: tuple[int, int]) -> Tensor:
    a = _as_tensor(a)
    val = a.value.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.value.shape))

    return Tensor._result(val, (a,), bwd)


def concat(parts: list, axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    val = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi] if axis == 1 else g[lo:hi, :])

    return Tensor._result(val, tuple(parts), bwd)


def gather_cols(a, idx) -> Tensor:
    """Select columns `idx` (with repeats allowed), keeping row count."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    val = a.value[:, idx]

    def bwd(g):
        if a.requires_grad:
            out = np.zeros_like(a.value)
            np.add.at(out, (slice(None), idx), g)
            a._accumulate(out)

    return Tensor._result(val, (a,), bwd)


def gather_rows(a, idx) -> Tensor:
    """Select rows `idx` (with repeats allowed), keeping column count."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    val = a.value[idx, :]

    def bwd(g):
        if a.requires_grad:
            out = np.zeros_like(a.value)
            np.add.at(out, idx, g)
            a._accumulate(out)

    return Tensor._result(val, (a,), bwd)


def scatter_add_rows(a, idx, n_rows: int) -> Tensor:
    """Accumulate row i of `a` into output row idx[i]; inverse of gather_rows."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[0] != a.value.shape[0]:
        raise ValueError("scatter_add_rows needs one target row per input row")
    val = np.zeros((n_rows, a.value.shape[1]))
    np.add.at(val, idx, a.value)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g[idx, :])

    return Tensor._result(val, (a,), bwd)


def trace(a) -> Tensor:
    a = _as_tensor(a)
    n, m = a.value.shape
    if n != m:
        raise ValueError(f"trace needs a square matrix, got {a.value.shape}")
    val = np.array([[np.trace(a.value)]])

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g[0, 0] * np.eye(n))

    return Tensor._result(val, (a,), bwd)


def detach(a) -> Tensor:
    """Cut the gradient flow; the value is shared, not copied."""
    a = _as_tensor(a)
    out = Tensor.__new__(Tensor)
    out.value = a.value
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward_fn = None
    return out


# ---------------------------------------------------------------------------
# distributions


def gaussian_kl(mu1, sigma1, mu2, sigma2) -> Tensor:
    """Elementwise KL(N(mu1, sigma1^2) || N(mu2, sigma2^2)).

    Closed form: log(s2/s1) + (s1^2 + (mu1-mu2)^2) / (2 s2^2) - 1/2.
    Standard deviations must be strictly positive.
    """
    mu1, sigma1 = _as_tensor(mu1), _as_tensor(sigma1)
    mu2, sigma2 = _as_tensor(mu2), _as_tensor(sigma2)
    if np.any(sigma1.value <= 0.0) or np.any(sigma2.value <= 0.0):
        raise ValueError("gaussian_kl needs strictly positive standard deviations")
    var2 = square(sigma2)
    quad = div(add(square(sigma1), square(sub(mu1, mu2))), mul(var2, 2.0))
    return add(sub(sub(log(sigma2), log(sigma1)), 0.5), quad)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moments keyed by parameter name; step_count drives bias correction."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]
) -> tuple[dict[str, Tensor], AdamState]:
    """One Adam update, in place on the parameter values.

    Every parameter must have a gradient of matching shape.  Calling with all
    zero gradients still advances step_count but leaves values untouched.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.value.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.value.shape}"
            )
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    """Glorot-uniform initializer used by every MLP in the package."""
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))
