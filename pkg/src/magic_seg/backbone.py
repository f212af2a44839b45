"""Weight-shared conv encoder, segmentation head and the parameter file format."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DEFAULT_REGISTRY, FormatError, Registry

CKPT_MAGIC = b"MAGP"
CKPT_VERSION = 1


class ChannelNorm(nn.Module):
    """Per-sample, per-channel normalisation over the spatial dims with a learned scale.

    There is deliberately no learned shift: together with bias-free convs
    (GELU(0) = 0) an all-zero input maps to an all-zero feature, which the
    ranking step scores as 0 instead of an arbitrary constant pattern.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.group_norm(x, x.shape[1], self.weight, None, self.eps)


class Encoder(nn.Module):
    """Three conv blocks, strides (2, 2, 1), widths 3 -> D/2 -> D -> D.

    Each block is a bias-free conv, GELU, then :class:`ChannelNorm`, so a
    single sample is normalised independently of the rest of the batch.
    """

    def __init__(self, dim: int = 16, in_channels: int = 3):
        super().__init__()
        half = max(dim // 2, 1)
        widths = [(in_channels, half, 2), (half, dim, 2), (dim, dim, 1)]
        self.blocks = nn.ModuleList()
        for cin, cout, stride in widths:
            self.blocks.append(nn.ModuleDict({
                "conv": nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
                "norm": ChannelNorm(cout),
            }))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block["norm"](F.gelu(block["conv"](x)))
        return x


class SegHead(nn.Module):
    """Two (x2 nearest upsample, 3x3 conv, GELU) blocks and a 1x1 projection to K logits."""

    def __init__(self, dim: int, classes: int):
        super().__init__()
        self.up1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.up2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.proj = nn.Conv2d(dim, classes, 1)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.up1(F.interpolate(feature, scale_factor=2, mode="nearest")))
        x = F.gelu(self.up2(F.interpolate(x, scale_factor=2, mode="nearest")))
        return self.proj(x)


@dataclass
class FeatureSet:
    """Per-modality encoder outputs in registry order."""

    features: "OrderedDict[str, torch.Tensor]"

    def names(self) -> tuple[str, ...]:
        return tuple(self.features)

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.features[name]


def as_tensor(x, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.from_numpy(np.asarray(x)).to(dtype)


def encode(encoder: Encoder, inputs: Mapping[str, object], subset: Sequence[str],
           registry: Registry = DEFAULT_REGISTRY) -> FeatureSet:
    """Run the shared encoder on each modality in ``subset``.

    ``inputs`` maps modality name to a ``(3, H, W)`` array or tensor. All
    requested modalities go through one batched call, so they see exactly
    the same weights.
    """
    names = registry.ordered(subset)
    if not names:
        raise ValueError("subset must be non-empty")
    missing = [n for n in names if n not in inputs]
    if missing:
        raise ValueError(f"input lacks modalities {missing}")
    dtype = next(encoder.parameters()).dtype
    xs = [as_tensor(inputs[n], dtype) for n in names]
    shape = xs[0].shape
    for n, x in zip(names, xs):
        if x.dim() != 3 or x.shape[0] != 3:
            raise ValueError(f"modality {n} has shape {tuple(x.shape)}, expected (3, H, W)")
        if x.shape != shape:
            raise ValueError(f"modality {n} has shape {tuple(x.shape)}, others have {tuple(shape)}")
    out = encoder(torch.stack(xs))
    return FeatureSet(OrderedDict((n, out[i]) for i, n in enumerate(names)))


def seghead(head: SegHead, feature: torch.Tensor, image_size: tuple[int, int] | None = None) -> torch.Tensor:
    """``(D, h, w)`` feature to ``(K, 4h, 4w)`` logits; ``image_size`` checks the contract."""
    if feature.dim() != 3:
        raise ValueError(f"feature must be (D, h, w), got {tuple(feature.shape)}")
    if feature.shape[0] != head.up1.in_channels:
        raise ValueError(f"feature width {feature.shape[0]} != head width {head.up1.in_channels}")
    if image_size is not None and (feature.shape[1] * 4, feature.shape[2] * 4) != tuple(image_size):
        raise ValueError(f"feature spatial {tuple(feature.shape[1:])} does not match image {tuple(image_size)}")
    return head(feature.unsqueeze(0))[0]


# --------------------------------------------------------------------------- parameter files
#
# header : "MAGP" | version u16 | D u16 | K u16 | registry count u8 + (u8 len, utf-8 name)*
#          | u32 len + utf-8 key=value model config
#          | u64 step | u64 epoch
# body   : u32 tensor count, then per tensor:
#          u16 len + utf-8 name | u8 ndim | u32 dims* | float32 LE data

_CK_HEAD = struct.Struct("<4sHHH")


def write_param_file(path: str | Path, tensors: Mapping[str, torch.Tensor], *, dim: int, classes: int,
                     registry: Registry, model_config: str = "", step: int = 0, epoch: int = 0) -> None:
    parts = [_CK_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, dim, classes), struct.pack("<B", len(registry))]
    for n in registry.names:
        raw = n.encode("utf-8")
        parts.append(struct.pack("<B", len(raw)) + raw)
    cfg = model_config.encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    parts.append(struct.pack("<QQ", step, epoch))
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).numpy()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


@dataclass
class ParamFile:
    dim: int
    classes: int
    registry: Registry
    model_config: str
    step: int
    epoch: int
    tensors: "OrderedDict[str, torch.Tensor]"


def read_param_file(path: str | Path) -> ParamFile:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    magic, version, dim, classes = _CK_HEAD.unpack(take(_CK_HEAD.size))
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version} (expected {CKPT_VERSION})")
    names = []
    for _ in range(take(1)[0]):
        names.append(take(take(1)[0]).decode("utf-8"))
    (cfg_len,) = struct.unpack("<I", take(4))
    model_config = take(cfg_len).decode("utf-8")
    step, epoch = struct.unpack("<QQ", take(16))
    (count,) = struct.unpack("<I", take(4))
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        ndim = take(1)[0]
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        numel = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * numel), dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = torch.from_numpy(arr)
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return ParamFile(dim, classes, Registry(names), model_config, step, epoch, tensors)
