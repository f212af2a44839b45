"""Multi-modal aggregation: a gated, multi-scale transform per modality, averaged.

For every input feature ``f`` (shape ``(D, h, w)``):

    u = pre_conv(f)                                   # 3x3, D -> D
    p = sum_s avgpool_s(u)                            # stride 1, zero padding (s-1)/2
    g = sigmoid(post_conv(p))                         # 1x1, D -> D, shared
    v = g * f + f
    z = mlp_slot(v)                                   # 1x1, D -> D, one per slot

and the output is the mean of ``z`` over the inputs. A "slot" is the
modality's registry index for the semantic aggregator, and the rank position
(0 = most robust, 1 = most fragile) for the aggregator fed by the selection step.

The slot MLPs start as identity maps, so at initialisation the aggregate is a
gated average of its inputs and cosine rankings against it are meaningful
from the first step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeatureSet
from .data import DEFAULT_REGISTRY, Registry

DEFAULT_POOLING = (3, 7, 11)


@dataclass(frozen=True)
class MamSwitches:
    use_residual: bool = True
    use_pooling: bool = True
    use_mlp: bool = True


@dataclass
class SemanticFeature:
    tensor: torch.Tensor
    contributing: tuple[str, ...]


@dataclass
class SalientFeature:
    tensor: torch.Tensor
    robust: str | None = None
    fragile: str | None = None


def check_pooling_sizes(sizes: Sequence[int]) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in sizes)
    if not sizes:
        raise ValueError("pooling_sizes must be non-empty")
    if any(s < 1 or s % 2 == 0 for s in sizes):
        raise ValueError(f"pooling sizes must be odd positive integers, got {sizes}")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"pooling sizes must be strictly increasing, got {sizes}")
    return sizes


def pooled_sum(u: torch.Tensor, sizes: Sequence[int]) -> torch.Tensor:
    """Sum of stride-1 average pools (zero padded, pad counted in the divisor)."""
    total = None
    for s in sizes:
        p = F.avg_pool2d(u, s, stride=1, padding=(s - 1) // 2, count_include_pad=True)
        total = p if total is None else total + p
    return total


class Aggregator(nn.Module):
    def __init__(self, dim: int, slots: int, pooling_sizes: Sequence[int] = DEFAULT_POOLING,
                 switches: MamSwitches = MamSwitches(), identity_init: bool = True):
        super().__init__()
        self.pooling_sizes = check_pooling_sizes(pooling_sizes)
        self.switches = switches
        self.pre_conv = nn.Conv2d(dim, dim, 3, padding=1)
        self.post_conv = nn.Conv2d(dim, dim, 1)
        self.mlps = nn.ModuleList(nn.Conv2d(dim, dim, 1) for _ in range(slots))
        if identity_init:
            with torch.no_grad():
                for m in self.mlps:
                    m.weight.copy_(torch.eye(dim).reshape(dim, dim, 1, 1))
                    m.bias.zero_()

    def branch(self, f: torch.Tensor) -> torch.Tensor:
        """Gated residual part for a batch ``(N, D, h, w)``, before the slot MLP."""
        u = self.pre_conv(f)
        p = pooled_sum(u, self.pooling_sizes) if self.switches.use_pooling else u
        g = torch.sigmoid(self.post_conv(p))
        return g * f + f if self.switches.use_residual else g * f

    def forward(self, feats: Sequence[torch.Tensor], slots: Sequence[int]) -> torch.Tensor:
        if not feats:
            raise ValueError("aggregator needs at least one feature")
        if len(feats) != len(slots):
            raise ValueError("one slot index per feature is required")
        for s in slots:
            if not 0 <= s < len(self.mlps):
                raise ValueError(f"no MLP registered for slot {s}")
        v = self.branch(torch.stack(list(feats)))
        zs = []
        for i, s in enumerate(slots):
            vi = v[i:i + 1]
            zs.append(self.mlps[s](vi)[0] if self.switches.use_mlp else vi[0])
        return torch.stack(zs).mean(dim=0)


def mam_forward(features: FeatureSet, mam: Aggregator, registry: Registry = DEFAULT_REGISTRY) -> SemanticFeature:
    if len(features) == 0:
        raise ValueError("empty feature set")
    names = features.names()
    slots = []
    for n in names:
        try:
            slots.append(registry.index(n))
        except KeyError as exc:
            raise ValueError(str(exc)) from exc
    out = mam([features[n] for n in names], slots)
    return SemanticFeature(out, tuple(names))


def mam_forward_ranked(selected: Sequence[torch.Tensor], mam: Aggregator) -> SalientFeature:
    """Aggregate the (robust, fragile) pair with rank-indexed MLPs."""
    if len(selected) != 2:
        raise ValueError(f"ranked aggregation takes exactly 2 features, got {len(selected)}")
    return SalientFeature(mam(list(selected), [0, 1]))
