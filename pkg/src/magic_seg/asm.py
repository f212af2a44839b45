"""Training-time selection: rank modality features, build soft/hard targets, consistency cosines."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbone import FeatureSet
from .data import DEFAULT_REGISTRY, Registry
from .mam import SemanticFeature


@dataclass
class RankingResult:
    scores: dict[str, float]
    order: tuple[str, ...]
    zero_norm: tuple[str, ...] = ()

    @property
    def selected(self) -> tuple[str, str]:
        return self.order[0], self.order[-1]

    @property
    def remaining(self) -> tuple[str, ...]:
        return self.order[1:-1]


@dataclass
class SupervisionMask:
    targets: torch.Tensor  # (K, H, W)
    agree_map: torch.Tensor  # (H, W) bool


@dataclass
class ConsistencyPair:
    c1: torch.Tensor  # (D,)
    c2: torch.Tensor  # (D,)


def _cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine along ``dim``; 0 where either side has zero norm."""
    tiny = torch.finfo(a.dtype).tiny
    # clamp keeps the backward finite at exactly-zero vectors
    sa = (a * a).sum(dim=dim)
    sb = (b * b).sum(dim=dim)
    denom = torch.where((sa > 0) & (sb > 0), (sa.clamp_min(tiny) * sb.clamp_min(tiny)).sqrt(),
                        torch.zeros_like(sa))
    dot = (a * b).sum(dim=dim)
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, dot / safe, torch.zeros_like(dot))


def rank_modalities(features: FeatureSet, semantic: SemanticFeature,
                    registry: Registry = DEFAULT_REGISTRY) -> RankingResult:
    names = features.names()
    if len(names) < 2:
        raise ValueError(f"ranking needs at least 2 modalities, got {len(names)}")
    ref = semantic.tensor.detach().reshape(-1)
    scores, zero = {}, []
    with torch.no_grad():
        for n in names:
            f = features[n].detach().reshape(-1)
            if float(f.norm()) == 0.0 or float(ref.norm()) == 0.0:
                zero.append(n)
            scores[n] = float(_cosine(f, ref))
    order = tuple(sorted(names, key=lambda n: (-scores[n], registry.index(n))))
    return RankingResult(scores, order, tuple(zero))


def build_mask(pm_logits: torch.Tensor, label: torch.Tensor) -> SupervisionMask:
    """Soft targets where the main prediction is right, one-hot labels elsewhere.

    The logits are detached: nothing flows back into the main branch through
    the targets.
    """
    if pm_logits.dim() != 3 or label.shape != pm_logits.shape[1:]:
        raise ValueError(f"logits {tuple(pm_logits.shape)} and label {tuple(label.shape)} do not match")
    K = pm_logits.shape[0]
    label = label.long()
    if label.numel() and (int(label.min()) < 0 or int(label.max()) >= K):
        raise ValueError(f"label ids outside [0, {K})")
    logits = pm_logits.detach()
    agree = logits.argmax(dim=0) == label
    soft = torch.softmax(logits, dim=0)
    hard = F.one_hot(label, K).permute(2, 0, 1).to(logits.dtype)
    return SupervisionMask(torch.where(agree.unsqueeze(0), soft, hard), agree)


def consistency_pair(remaining: list[torch.Tensor], reference: torch.Tensor) -> ConsistencyPair:
    """Per-channel cosine of each remaining feature against the reference feature."""
    if len(remaining) != 2:
        raise ValueError(f"consistency needs exactly 2 remaining features, got {len(remaining)}")
    D = reference.shape[0]
    ref = reference.reshape(D, -1)
    c1 = _cosine(remaining[0].reshape(D, -1), ref)
    c2 = _cosine(remaining[1].reshape(D, -1), ref)
    return ConsistencyPair(c1, c2)
