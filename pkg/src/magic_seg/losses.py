"""Segmentation, selection and consistency losses.

``loss_m`` and ``loss_s`` are per-pixel cross-entropies averaged over pixels.
``loss_c`` maps two channel-cosine vectors to distributions over channels,
``q = normalize((c + 1) / 2 + eps)``, and returns

    sum_d q1 log(q1 / m) + q2 log(q2 / m),   m = (q1 + q2) / 2
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .asm import ConsistencyPair, SupervisionMask

EPS = 1e-8


class NonFiniteError(FloatingPointError):
    """A loss input or loss value is NaN/Inf."""


@dataclass
class LossBreakdown:
    l_m: float
    l_s: float
    l_c: float
    total: float
    lam: float
    beta: float

    def as_row(self) -> dict[str, float]:
        return {"l_m": self.l_m, "l_s": self.l_s, "l_c": self.l_c, "total": self.total}


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")


def loss_m(pm_logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    _check_finite(pm_logits, "l_m (P_m logits)")
    K = pm_logits.shape[0]
    label = label.long()
    if label.shape != pm_logits.shape[1:]:
        raise ValueError(f"label {tuple(label.shape)} vs logits {tuple(pm_logits.shape)}")
    if int(label.min()) < 0 or int(label.max()) >= K:
        raise ValueError(f"label ids outside [0, {K})")
    logp = torch.log_softmax(pm_logits, dim=0)
    return -logp.gather(0, label.unsqueeze(0)).mean()


def loss_s(ps_logits: torch.Tensor, mask: SupervisionMask) -> torch.Tensor:
    _check_finite(ps_logits, "l_s (P_s logits)")
    if mask.targets.shape != ps_logits.shape:
        raise ValueError(f"mask {tuple(mask.targets.shape)} vs logits {tuple(ps_logits.shape)}")
    logp = torch.log_softmax(ps_logits, dim=0)
    return -(mask.targets.to(logp.dtype) * logp).sum(dim=0).mean()


def channel_distribution(c: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    a = (c + 1.0) / 2.0 + eps
    return a / a.sum()


class _SymmetricJS(torch.autograd.Function):
    """Two-term divergence between channel distributions, explicit backward."""

    @staticmethod
    def forward(ctx, c1, c2, eps):
        a1 = (c1 + 1.0) / 2.0 + eps
        a2 = (c2 + 1.0) / 2.0 + eps
        s1, s2 = a1.sum(), a2.sum()
        q1, q2 = a1 / s1, a2 / s2
        m = 0.5 * (q1 + q2)
        g1 = torch.log(q1 / m)
        g2 = torch.log(q2 / m)
        ctx.save_for_backward(q1, q2, g1, g2, s1, s2)
        return (q1 * g1 + q2 * g2).sum()

    @staticmethod
    def backward(ctx, grad):
        q1, q2, g1, g2, s1, s2 = ctx.saved_tensors
        # dL/dq_i = log(q_i / m); chain through a/sum(a) and the (c+1)/2 map
        d1 = (g1 - (g1 * q1).sum()) / s1 * 0.5
        d2 = (g2 - (g2 * q2).sum()) / s2 * 0.5
        return grad * d1, grad * d2, None


def loss_c(pair: ConsistencyPair, eps: float = EPS) -> torch.Tensor:
    c1, c2 = pair.c1, pair.c2
    if c1.numel() == 0 or c2.numel() == 0:
        raise ValueError("consistency vectors must have at least one channel")
    if c1.shape != c2.shape:
        raise ValueError(f"c1 {tuple(c1.shape)} vs c2 {tuple(c2.shape)}")
    _check_finite(c1, "l_c (c1)")
    _check_finite(c2, "l_c (c2)")
    return _SymmetricJS.apply(c1, c2, eps)


def total_loss(l_m: float, l_s: float, l_c: float, lam: float = 0.05, beta: float = 2.0) -> LossBreakdown:
    if lam < 0 or beta < 0:
        raise ValueError(f"loss weights must be >= 0, got lambda={lam}, beta={beta}")
    total = l_m + lam * l_s + beta * l_c
    for name, v in (("l_m", l_m), ("l_s", l_s), ("l_c", l_c), ("total", total)):
        if not math.isfinite(v):
            raise NonFiniteError(f"non-finite loss term {name}")
    return LossBreakdown(float(l_m), float(l_s), float(l_c), float(total), float(lam), float(beta))
