"""The full network: shared encoder, semantic aggregator, rank aggregator, seg head.

Only the encoder, the semantic aggregator and the head take part in
inference; the rank aggregator is trained through the selection branch and
is carried in checkpoints so training can resume.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn as nn

from . import backbone
from .backbone import Encoder, FeatureSet, SegHead
from .config import ConfigError, format_kv, parse_kv, to_bool, to_int_list
from .data import DEFAULT_REGISTRY, FormatError, Registry
from .mam import DEFAULT_POOLING, Aggregator, MamSwitches, SemanticFeature, mam_forward

GROUPS = ("encoder", "seghead", "mam", "asm_mam")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 16
    classes: int = 5
    pooling_sizes: tuple[int, ...] = DEFAULT_POOLING
    switches: MamSwitches = field(default_factory=MamSwitches)

    def to_text(self) -> str:
        return format_kv({
            "dim": self.dim,
            "classes": self.classes,
            "pooling_sizes": self.pooling_sizes,
            "use_residual": self.switches.use_residual,
            "use_pooling": self.switches.use_pooling,
            "use_mlp": self.switches.use_mlp,
        })

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        raw = parse_kv(text, "<checkpoint model config>")
        try:
            return cls(
                dim=int(raw["dim"]),
                classes=int(raw["classes"]),
                pooling_sizes=to_int_list(raw["pooling_sizes"], "pooling_sizes"),
                switches=MamSwitches(
                    to_bool(raw["use_residual"], "use_residual"),
                    to_bool(raw["use_pooling"], "use_pooling"),
                    to_bool(raw["use_mlp"], "use_mlp"),
                ),
            )
        except KeyError as exc:
            raise ConfigError(f"checkpoint model config lacks {exc}") from exc


class MagicNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), registry: Registry = DEFAULT_REGISTRY):
        super().__init__()
        if config.dim < 1:
            raise ConfigError(f"feature dim must be >= 1, got {config.dim}")
        self.config = config
        self.registry = registry
        self.encoder = Encoder(config.dim)
        self.seghead = SegHead(config.dim, config.classes)
        self.mam = Aggregator(config.dim, len(registry), config.pooling_sizes, config.switches)
        self.asm_mam = Aggregator(config.dim, 2, config.pooling_sizes, config.switches)

    @classmethod
    def seeded(cls, seed: int, config: ModelConfig = ModelConfig(),
               registry: Registry = DEFAULT_REGISTRY) -> "MagicNet":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(config, registry)

    def encode(self, inputs: Mapping[str, object], subset: Sequence[str]) -> FeatureSet:
        return backbone.encode(self.encoder, inputs, subset, self.registry)

    def aggregate(self, features: FeatureSet) -> SemanticFeature:
        return mam_forward(features, self.mam, self.registry)

    def head(self, feature: torch.Tensor, image_size=None) -> torch.Tensor:
        return backbone.seghead(self.seghead, feature, image_size)

    def logits(self, inputs: Mapping[str, object], subset: Sequence[str] | None = None) -> torch.Tensor:
        """Inference logits ``(K, H, W)`` from any non-empty subset of modalities."""
        subset = tuple(inputs) if subset is None else subset
        feats = self.encode(inputs, subset)
        size = next(iter(feats.features.values())).shape[1:]
        return self.head(self.aggregate(feats).tensor, (size[0] * 4, size[1] * 4))

    @torch.no_grad()
    def predict(self, inputs: Mapping[str, object], subset: Sequence[str] | None = None) -> torch.Tensor:
        return self.logits(inputs, subset).argmax(dim=0)

    def named_groups(self) -> "OrderedDict[str, torch.Tensor]":
        """Parameters keyed ``group/path``, e.g. ``mam/pre_conv.weight``."""
        out: OrderedDict[str, torch.Tensor] = OrderedDict()
        for g in GROUPS:
            for name, p in getattr(self, g).named_parameters():
                out[f"{g}/{name}"] = p
        return out

    def save(self, path: str | Path, extra: Mapping[str, torch.Tensor] | None = None,
             step: int = 0, epoch: int = 0) -> None:
        tensors = OrderedDict((k, v.detach()) for k, v in self.named_groups().items())
        if extra:
            tensors.update(extra)
        backbone.write_param_file(path, tensors, dim=self.config.dim, classes=self.config.classes,
                                  registry=self.registry, model_config=self.config.to_text(),
                                  step=step, epoch=epoch)

    @classmethod
    def load(cls, path: str | Path) -> tuple["MagicNet", backbone.ParamFile]:
        pf = backbone.read_param_file(path)
        model = cls(ModelConfig.from_text(pf.model_config), pf.registry)
        params = model.named_groups()
        missing = [k for k in params if k not in pf.tensors]
        if missing:
            raise FormatError(f"{path}: checkpoint lacks parameters {missing[:3]}...")
        with torch.no_grad():
            for k, p in params.items():
                t = pf.tensors[k]
                if t.shape != p.shape:
                    raise FormatError(f"{path}: {k} has shape {tuple(t.shape)}, expected {tuple(p.shape)}")
                p.copy_(t)
        return model, pf
