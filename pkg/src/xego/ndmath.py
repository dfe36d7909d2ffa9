"""Minimal dense-tensor numerics with a reverse-mode tape.

Tensors wrap numpy arrays (float64 by default, float32 passes through).
Ops compute the forward value immediately; when a Tape is active they also
record a closure that accumulates gradients during the backward sweep.
Accumulation order is the record order reversed, so results are
bit-reproducible for identical inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "matmul",
    "transpose",
    "add",
    "sub",
    "scale",
    "mul",
    "concat",
    "relu",
    "exp",
    "sigmoid",
    "log_sigmoid_stable",
    "softplus_stable",
    "mean_over_axis",
    "mean_all",
    "l2_normalize_rows",
    "gather_rows",
    "AdamWState",
    "adamw_step",
    "AdamW",
    "grad_check",
]

NORM_GUARD = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class Tensor:
    """Dense array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype == np.float32 else np.float64
        self.data = np.array(arr, dtype=dtype, copy=True)
        if self.data.ndim > 3:
            raise ShapeError(f"tensors support at most 3 dims, got shape {self.data.shape}")
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data, dtype=np.float64)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records op applications for one backward sweep.

    Use as a context manager around the forward pass, then call
    ``tape.backward(loss)``. Without an active tape, ops are plain forward
    computations.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones_like(loss.data, dtype=np.float64))
        for rec in reversed(self.records):
            g_out = rec.out.grad
            if g_out is None:
                continue
            grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, grads):
                if g is not None:
                    t.accumulate_grad(g)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        tape.records.append(_Record(out, inputs, backward))
    return out


# ---------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with a of 2 or 3 dims and b a 2-D matrix."""
    if a.ndim not in (2, 3) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ b.data.T
        if a.ndim == 2:
            gb = a.data.T @ g
        else:
            gb = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
        return ga, gb

    return _record(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (g.T,))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_addable(a: Tensor, b: Tensor, opname: str) -> None:
    # Equal shapes, a scalar operand, or a trailing-dim bias vector.
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_addable(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_addable(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either operand may be a scalar tensor."""
    if not (a.shape == b.shape or a.data.size == 1 or b.data.size == 1):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    nd = parts[0].ndim
    for p in parts:
        if p.ndim != nd:
            raise ShapeError(
                f"concat: rank mismatch {[tuple(q.shape) for q in parts]}"
            )
    ax = axis % nd
    out = Tensor(np.concatenate([p.data for p in parts], axis=ax))
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            for i in range(len(parts))
        )

    return _record(out, tuple(parts), backward)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return _record(out, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    val = out.data.copy()
    return _record(out, (a,), lambda g: (g * val,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_val = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out_val[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_val[~pos] = ex / (1.0 + ex)
    out = Tensor(out_val)
    s = out.data.copy()
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def _softplus(x: np.ndarray) -> np.ndarray:
    # max(x, 0) + log1p(exp(-|x|)): branchless and overflow-free.
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_stable(a: Tensor) -> Tensor:
    out = Tensor(_softplus(a.data))
    x = a.data

    def backward(g):
        return (g * _sigmoid_val(x),)

    return _record(out, (a,), backward)


def _sigmoid_val(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid_stable(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed as -softplus(-x); finite for |x| up to 1e6."""
    out = Tensor(-_softplus(-a.data))
    x = a.data

    def backward(g):
        # d/dx log sigmoid(x) = sigmoid(-x)
        return (g * _sigmoid_val(-x),)

    return _record(out, (a,), backward)


def mean_over_axis(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"mean_over_axis: axis {axis} out of range for shape {a.shape}")
    ax = axis % a.ndim
    n = a.shape[ax]
    out = Tensor(a.data.mean(axis=ax))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape) / n,)

    return _record(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())

    def backward(g):
        return (np.broadcast_to(g, a.shape) / n,)

    return _record(out, (a,), backward)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Row-wise x / (||x|| + 1e-12); the guard keeps the zero row finite."""
    if a.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got shape {a.shape}")
    x = a.data
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    denom = norms + NORM_GUARD
    out = Tensor(x / denom)

    def backward(g):
        norms_safe = np.maximum(norms, NORM_GUARD)
        dot = (g * x).sum(axis=1, keepdims=True)
        return (g / denom - x * dot / (norms_safe * denom * denom),)

    return _record(out, (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows expects 1-D indices, got shape {idx.shape}")
    out = Tensor(a.data[idx])

    def backward(g):
        ga = np.zeros_like(a.data, dtype=np.float64)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# AdamW

@dataclass
class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamWState":
        return cls(
            m=[np.zeros_like(p.data, dtype=np.float64) for p in params],
            v=[np.zeros_like(p.data, dtype=np.float64) for p in params],
        )


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    *,
    lr: float = 3e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay is applied directly to the parameter (theta -= lr*wd*theta),
    separate from the adaptive moment step.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adamw_step: got {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} state slots"
        )
    b1, b2 = betas
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError(f"adamw_step: grad shape {g.shape} vs param {p.data.shape}")
        if weight_decay != 0.0:
            p.data -= lr * weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Convenience wrapper binding params, state, and per-param decay flags."""

    def __init__(
        self,
        params: Sequence[Tensor],
        *,
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
        no_decay: Sequence[Tensor] = (),
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        no_decay_ids = {id(p) for p in no_decay}
        self._decay_idx = [i for i, p in enumerate(self.params) if id(p) not in no_decay_ids]
        self._plain_idx = [i for i, p in enumerate(self.params) if id(p) in no_decay_ids]
        self.state = AdamWState.for_params(self.params)
        # Split state views so both groups share one step counter.
        self._decay_state = AdamWState(
            m=[self.state.m[i] for i in self._decay_idx],
            v=[self.state.v[i] for i in self._decay_idx],
        )
        self._plain_state = AdamWState(
            m=[self.state.m[i] for i in self._plain_idx],
            v=[self.state.v[i] for i in self._plain_idx],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = []
        for p in self.params:
            grads.append(p.grad if p.grad is not None else np.zeros_like(p.data))
        kw = dict(lr=self.lr, betas=self.betas, eps=self.eps)
        adamw_step(
            [self.params[i] for i in self._decay_idx],
            [grads[i] for i in self._decay_idx],
            self._decay_state,
            weight_decay=self.weight_decay,
            **kw,
        )
        adamw_step(
            [self.params[i] for i in self._plain_idx],
            [grads[i] for i in self._plain_idx],
            self._plain_state,
            weight_decay=0.0,
            **kw,
        )


# ---------------------------------------------------------------------------
# finite differences

def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error of analytic grads vs central differences.

    ``f`` rebuilds the scalar loss from the current parameter values on each
    call. Error per coordinate is |analytic - numeric| / max(1e-8, |numeric|).
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("grad_check: non-finite loss")
        tape.backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("grad_check: non-finite loss at perturbed point")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
