"""Minimal reverse-mode autodiff over dense float64 arrays.

Just enough machinery for a small dual-encoder and its adaptation losses:
2-D matrices, 1-D vectors and scalars, with an explicit per-session tape.
No broadcasting beyond row vectors, no views, no GPU.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "NumericError",
    "Tensor",
    "Tape",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "gelu",
    "log",
    "exp",
    "mean",
    "layer_norm",
    "softmax_rows",
    "softmax_cols",
    "l2_normalize_rows",
    "log_sum_exp_rows",
    "cross_entropy_rows",
    "AdamState",
    "adam_step",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 array, optionally recorded on a tape.

    A tensor participates in gradient accumulation only if it is attached
    to a tape (either watched as a leaf or produced by a recorded op).
    Plain constants keep ``tape is None`` and never receive gradients.
    """

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.tape is None:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:  # pragma: no cover
        taped = "taped" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {taped})"


class Tape:
    """Ordered record of operations for one reverse pass.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction; ``backward`` walks it once, in reverse.
    A tape and its tensors belong to a single thread of execution.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, callable]] = []
        self._used = False

    def watch(self, value) -> Tensor:
        """Register an array as a differentiable leaf. Shares the buffer."""
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.grad = None
        t.tape = self
        return t

    def _record(self, out: Tensor, backward) -> None:
        out.tape = self
        self._nodes.append((out, backward))

    def backward(self, output: Tensor) -> None:
        """Accumulate gradients of a scalar output into all taped tensors."""
        if self._used:
            raise RuntimeError("tape already consumed by a backward pass")
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.data.ndim != 0:
            raise ShapeError("backward expects a scalar output")
        self._used = True
        output.grad = np.ones_like(output.data)
        for out, rule in reversed(self._nodes):
            if out.grad is None:
                continue
            rule(out.grad)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands live on different tapes")
            tape = t.tape
    return tape


def _make(data: np.ndarray, tape: Tape | None, backward) -> Tensor:
    out = Tensor(data)
    if tape is not None:
        tape._record(out, backward)
    return out


def add(a, b) -> Tensor:
    """Elementwise sum; a trailing-axis row vector broadcasts over rows."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        # allow (m, n) + (n,) bias-style broadcast, in either order
        if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
            pass
        elif b.data.ndim == 2 and a.data.ndim == 1 and b.shape[1] == a.shape[0]:
            a, b = b, a
        else:
            raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    tape = _result_tape(a, b)
    data = a.data + b.data

    def backward(g):
        a._accumulate(g)
        if b.data.ndim < g.ndim:
            b._accumulate(g.sum(axis=0))
        else:
            b._accumulate(g)

    return _make(data, tape, backward)


def mul(a, b) -> Tensor:
    """Elementwise product; one operand may be a scalar tensor."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    tape = _result_tape(a, b)
    data = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        a._accumulate(ga.sum() if a.data.ndim == 0 and ga.ndim > 0 else ga)
        b._accumulate(gb.sum() if b.data.ndim == 0 and gb.ndim > 0 else gb)

    return _make(data, tape, backward)


def scale(a, c: float) -> Tensor:
    """Multiply by a plain (non-differentiable) constant."""
    a = _lift(a)
    c = float(c)
    tape = _result_tape(a)

    def backward(g):
        a._accumulate(g * c)

    return _make(a.data * c, tape, backward)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree {a.shape} x {b.shape}")
    tape = _result_tape(a, b)
    data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(data, tape, backward)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D operand")
    tape = _result_tape(a)

    def backward(g):
        a._accumulate(g.T)

    return _make(a.data.T.copy(), tape, backward)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _lift(a)
    tape = _result_tape(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    return _make(data, tape, backward)


def log(a) -> Tensor:
    a = _lift(a)
    tape = _result_tape(a)
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(data, tape, backward)


def exp(a) -> Tensor:
    a = _lift(a)
    tape = _result_tape(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, tape, backward)


def mean(a) -> Tensor:
    """Scalar mean over all elements."""
    a = _lift(a)
    tape = _result_tape(a)
    n = a.data.size

    def backward(g):
        a._accumulate(np.full_like(a.data, float(g) / n))

    return _make(np.asarray(a.data.mean()), tape, backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by a learnable affine map."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    if x.data.ndim != 2:
        raise ShapeError("layer_norm expects a 2-D input")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({d},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    tape = _result_tape(x, gamma, beta)
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv_std
    data = gamma.data * y + beta.data

    def backward(g):
        beta._accumulate(g.sum(axis=0))
        gamma._accumulate((g * y).sum(axis=0))
        gy = g * gamma.data
        # d/dx of (x - mu)/std with mu, var both functions of x
        m1 = gy.mean(axis=1, keepdims=True)
        m2 = (gy * y).mean(axis=1, keepdims=True)
        x._accumulate(inv_std * (gy - m1 - y * m2))

    return _make(data, tape, backward)


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_along(a, temperature: float, axis: int) -> Tensor:
    a = _lift(a)
    if temperature <= 0:
        raise ValueError("softmax: temperature must be positive")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax: non-finite input")
    tape = _result_tape(a)
    p = _softmax(a.data / temperature, axis)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        a._accumulate(p * (g - dot) / temperature)

    return _make(p, tape, backward)


def softmax_rows(a, temperature: float = 1.0) -> Tensor:
    """Row-stochastic softmax of logits/temperature, max-subtracted."""
    return _softmax_along(a, temperature, axis=-1)


def softmax_cols(a, temperature: float = 1.0) -> Tensor:
    """Column-stochastic softmax of logits/temperature, max-subtracted."""
    return _softmax_along(a, temperature, axis=0)


def l2_normalize_rows(a) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeError("l2_normalize_rows expects a 2-D input")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise NumericError("l2_normalize_rows: (near-)zero row norm")
    tape = _result_tape(a)
    y = a.data / norms

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        a._accumulate((g - y * dot) / norms)

    return _make(y, tape, backward)


def log_sum_exp_rows(a) -> Tensor:
    """Stable per-row logsumexp; output lies in (rowmax, rowmax + log n].

    The max term is split off and the remainder folded in with log1p, so
    the strict lower bound survives in floating point whenever any other
    exponential is representable at all.
    """
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeError("log_sum_exp_rows expects a 2-D input")
    tape = _result_tape(a)
    rows = np.arange(a.shape[0])
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    rest = e.copy()
    rest[rows, a.data.argmax(axis=1)] = 0.0
    rest_sum = rest.sum(axis=1)
    data = m.ravel() + np.log1p(rest_sum)
    p = e / (1.0 + rest_sum)[:, None]

    def backward(g):
        a._accumulate(p * g[:, None])

    return _make(data, tape, backward)


def cross_entropy_rows(targets, probs) -> Tensor:
    """Mean over rows of -sum_j t_ij log p_ij.

    Differentiates through ``probs`` and, when taped, through ``targets``
    as well; pseudo-label targets are normally passed as constants.
    """
    targets, probs = _lift(targets), _lift(probs)
    if targets.shape != probs.shape:
        raise ShapeError(
            f"cross_entropy_rows: shapes differ {targets.shape} vs {probs.shape}"
        )
    if np.any(probs.data <= 0):
        raise NumericError("cross_entropy_rows: probabilities must be positive")
    tape = _result_tape(targets, probs)
    rows = probs.shape[0]
    logp = np.log(probs.data)
    data = np.asarray(-(targets.data * logp).sum() / rows)

    def backward(g):
        c = float(g) / rows
        probs._accumulate(-c * targets.data / probs.data)
        targets._accumulate(-c * logp)

    return _make(data, tape, backward)


class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    def __init__(self, params: list[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update, in place. A ``None`` grad is treated as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params/grads/state lengths disagree")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        state.m[i] *= beta1
        state.m[i] += (1.0 - beta1) * g
        state.v[i] *= beta2
        state.v[i] += (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
