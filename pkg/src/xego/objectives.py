"""Training objectives: cross-ego sigmoid contrastive loss, multi-label BCE.

The contrastive loss over a batch of L2-normalized embeddings ``u`` with a
+1/-1 pair mask ``m``:

    L = -(1/B) * sum_ij log sigmoid( m_ij * (t * <u_i, u_j> - b) )

``t`` is a learnable temperature kept positive by storing log(t); ``b`` is a
learnable bias offsetting the heavy negative-pair majority.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from xego import ndmath as nd
from xego.errors import DomainError

__all__ = [
    "ContrastiveParams",
    "init_bias",
    "cecl_loss",
    "bce_loss",
    "total_loss",
]

UNIT_NORM_TOL = 1e-6


@dataclass
class ContrastiveParams:
    """Learnable temperature (log-space) and bias of the pairwise loss."""

    t_log: nd.Tensor
    b: nd.Tensor
    trainable_bias: bool = True

    @classmethod
    def create(
        cls,
        t_init: float = 10.0,
        b_init: float = -3.0,
        trainable_bias: bool = True,
    ) -> "ContrastiveParams":
        if t_init <= 0:
            raise DomainError(f"temperature must be positive, got {t_init}")
        return cls(
            t_log=nd.tensor(math.log(t_init)),
            b=nd.tensor(float(b_init)),
            trainable_bias=trainable_bias,
        )

    @property
    def temperature(self) -> float:
        return math.exp(float(self.t_log.data))

    @property
    def bias(self) -> float:
        return float(self.b.data)

    def trainable(self) -> list[nd.Tensor]:
        out = [self.t_log]
        if self.trainable_bias:
            out.append(self.b)
        return out


def init_bias(mode: str, batch_shape: tuple[int, int]) -> float:
    """Bias init as the prior log-odds of the positive-pair ratio.

    ``paper`` uses one positive per row (ratio 1/B); ``exact`` counts the
    full A-sized positive groups (ratio G*A^2/B^2 = A/B).
    """
    g, a = batch_shape
    if g < 1 or a < 1:
        raise DomainError(f"batch shape must be positive, got {batch_shape}")
    b_total = g * a
    if mode == "paper":
        p = 1.0 / b_total
    elif mode == "exact":
        p = a / b_total
    else:
        raise DomainError(f"unknown bias mode {mode!r}; expected 'paper' or 'exact'")
    if p >= 1.0:
        return 0.0
    return math.log(p / (1.0 - p))


def cecl_loss(u: nd.Tensor, mask: np.ndarray, params: ContrastiveParams) -> nd.Tensor:
    """Batched pairwise sigmoid loss; rows of ``u`` must be unit vectors."""
    if u.ndim != 2:
        raise DomainError(f"embeddings must be a matrix, got shape {u.shape}")
    n = u.shape[0]
    mask = np.asarray(mask)
    if mask.shape != (n, n):
        raise DomainError(f"mask shape {mask.shape} does not match batch size {n}")
    norms = np.linalg.norm(u.data, axis=1)
    off = np.abs(norms - 1.0)
    if off.max(initial=0.0) > UNIT_NORM_TOL:
        worst = int(off.argmax())
        raise DomainError(
            f"row {worst} has norm {norms[worst]:.9f}; embeddings must be unit length"
        )
    sim = nd.matmul(u, nd.transpose(u))
    t = nd.exp(params.t_log)
    logits = nd.sub(nd.mul(sim, t), params.b)
    signed = nd.mul(logits, nd.tensor(mask.astype(np.float64)))
    per_pair = nd.log_sigmoid_stable(signed)
    # -(1/B) * sum over all B^2 pairs == -B * mean
    return nd.scale(nd.mean_all(per_pair), -float(n))


def bce_loss(logits: nd.Tensor, y: np.ndarray) -> nd.Tensor:
    """Binary cross entropy from logits: label-summed, batch-averaged.

    Computed via log-sigmoid on both branches so large logits never
    overflow.
    """
    y = np.asarray(y)
    if logits.shape != y.shape:
        raise DomainError(f"logits shape {logits.shape} vs labels {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise DomainError("labels must be binary 0/1")
    yf = y.astype(np.float64)
    n_labels = logits.shape[-1]
    pos = nd.mul(nd.tensor(yf), nd.log_sigmoid_stable(logits))
    neg = nd.mul(nd.tensor(1.0 - yf), nd.log_sigmoid_stable(nd.scale(logits, -1.0)))
    # mean over batch of per-sample sums == mean over all cells * n_labels
    return nd.scale(nd.mean_all(nd.add(pos, neg)), -float(n_labels))


def total_loss(cecl: nd.Tensor | None, bce: nd.Tensor, lam: float) -> nd.Tensor:
    """lam * contrastive + bce; pass cecl=None when lam is zero."""
    if lam < 0:
        raise DomainError(f"lambda must be non-negative, got {lam}")
    if cecl is None:
        if lam != 0.0:
            raise DomainError("contrastive term required when lambda is nonzero")
        return bce
    return nd.add(nd.scale(cecl, lam), bce)
