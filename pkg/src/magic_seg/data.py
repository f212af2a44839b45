"""Synthetic multi-modal scenes and the on-disk sample format.

Every scene is a set of class-labelled shapes rendered four ways:

* ``rgb``   - filled shapes in a per-class colour over a textured background
* ``depth`` - normalised distance-to-camera, shapes sit in per-class depth bands
* ``event`` - edge map, nonzero only on pixels touching a label boundary
* ``lidar`` - sparse samples of depth plus a per-class reflectance channel

All modalities are stored as 3-channel float32 planes in ``[0, 1]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .config import ConfigError, kv_hash, read_kv

MAGIC = b"MAGC"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

CORRUPTION_KINDS = ("gaussian-noise", "blackout", "blur-proxy", "downsample-proxy")


class FormatError(ValueError):
    """A sample or checkpoint file that cannot be decoded."""


class ModalityId(NamedTuple):
    name: str
    index: int


class Registry:
    """Fixed, ordered set of modalities a model is built for."""

    def __init__(self, names: Sequence[str]):
        names = tuple(names)
        if not names:
            raise ValueError("registry must contain at least one modality")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names in {names}")
        letters = [n[0].upper() for n in names]
        if len(set(letters)) != len(letters):
            raise ValueError(f"modality names must have distinct initials: {names}")
        self.ids = tuple(ModalityId(n, i) for i, n in enumerate(names))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Registry) and self.names == other.names

    def __hash__(self) -> int:
        return hash(self.names)

    def __repr__(self) -> str:
        return f"Registry({list(self.names)!r})"

    def index(self, name: str) -> int:
        for m in self.ids:
            if m.name == name:
                return m.index
        raise KeyError(f"unknown modality {name!r}; registry is {list(self.names)}")

    def letter(self, name: str) -> str:
        return name[0].upper()

    def ordered(self, names: Iterable[str]) -> tuple[str, ...]:
        """Deduplicate ``names`` and sort them into registry order."""
        wanted = set(names)
        unknown = wanted - set(self.names)
        if unknown:
            raise KeyError(f"unknown modalities {sorted(unknown)}; registry is {list(self.names)}")
        return tuple(n for n in self.names if n in wanted)

    def subset_string(self, names: Iterable[str]) -> str:
        return "+".join(self.letter(n) for n in self.ordered(names))

    def parse_subset(self, text: str) -> tuple[str, ...]:
        """Parse ``"R+D"`` (initials) or ``"rgb+depth"`` into registry order."""
        by_letter = {self.letter(n): n for n in self.names}
        parts = [p.strip() for p in text.split("+") if p.strip()]
        if not parts:
            raise ValueError(f"empty modality subset {text!r}")
        names = []
        for p in parts:
            if p in self.names:
                names.append(p)
            elif p.upper() in by_letter and len(p) == 1:
                names.append(by_letter[p.upper()])
            else:
                raise KeyError(f"unknown modality {p!r} in subset {text!r}")
        return self.ordered(names)

    def all_subsets(self) -> list[tuple[str, ...]]:
        """Every non-empty subset, ordered by size then registry position."""
        from itertools import combinations

        out = []
        for k in range(1, len(self) + 1):
            out.extend(combinations(self.names, k))
        return out


DEFAULT_REGISTRY = Registry(("rgb", "depth", "event", "lidar"))


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    classes: int = 5
    min_shapes: int = 2
    max_shapes: int = 5
    corruption_prob: float = 0.5

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"height and width must be >= 16, got {self.height}x{self.width}")
        if self.height % 4 or self.width % 4:
            raise ConfigError(f"height and width must be multiples of 4, got {self.height}x{self.width}")
        if not 2 <= self.classes <= 65535:
            raise ConfigError(f"classes must be in [2, 65535], got {self.classes}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError(f"need 1 <= min_shapes <= max_shapes, got {self.min_shapes}, {self.max_shapes}")
        if not 0.0 <= self.corruption_prob <= 1.0:
            raise ConfigError(f"corruption_prob must be in [0, 1], got {self.corruption_prob}")

    @classmethod
    def from_file(cls, path: str | Path) -> "SceneConfig":
        raw = read_kv(path)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{path}: unknown scene-config keys {sorted(unknown)}")
        kwargs: dict[str, object] = {}
        try:
            for key, value in raw.items():
                kwargs[key] = float(value) if key == "corruption_prob" else int(value)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls(**kwargs)

    def as_dict(self) -> dict[str, object]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def digest(self) -> str:
        return kv_hash(self.as_dict())


@dataclass(frozen=True)
class CorruptionSpec:
    target: str
    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity must be in [0, 1], got {self.severity}")


@dataclass
class ModalitySample:
    modalities: dict[str, np.ndarray]
    label: np.ndarray
    seed: int | None = None
    corruption: CorruptionSpec | None = None
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape

    def names(self) -> tuple[str, ...]:
        return tuple(self.modalities)


# --------------------------------------------------------------------------- rendering


def _palette(classes: int) -> np.ndarray:
    """Fixed RGB colour per class; class 0 (background) is a mid grey."""
    pal = np.empty((classes, 3))
    pal[0] = (0.45, 0.45, 0.45)
    for c in range(1, classes):
        hue = (c - 1) / max(classes - 1, 1)
        pal[c] = 0.5 + 0.45 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))
    return pal


def _depth_band(c: int, classes: int) -> float:
    # nearer for higher class ids; background sits at 1.0
    return 0.8 - 0.6 * (c - 1) / max(classes - 2, 1)


def _reflectance(c: int, classes: int) -> float:
    return 0.15 + 0.8 * c / max(classes - 1, 1)


def boundary_map(label: np.ndarray) -> np.ndarray:
    """Pixels with at least one 4-neighbour of a different class."""
    edge = np.zeros(label.shape, dtype=bool)
    dv = label[1:, :] != label[:-1, :]
    dh = label[:, 1:] != label[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return edge


def render_scene(rng: np.random.Generator, config: SceneConfig) -> tuple[dict[str, np.ndarray], np.ndarray]:
    H, W, K = config.height, config.width, config.classes
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    label = np.zeros((H, W), dtype=np.int32)
    depth = 1.0 - 0.05 * rng.random() - 0.05 * yy / H

    n_shapes = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    shapes = []
    for _ in range(n_shapes):
        c = int(rng.integers(1, K))
        d = _depth_band(c, K) + rng.uniform(-0.05, 0.05)
        shapes.append((d, c, rng.integers(0, 2), rng.uniform(0, H), rng.uniform(0, W),
                       rng.uniform(H / 8, H / 3), rng.uniform(W / 8, W / 3), rng.uniform(-0.1, 0.1, 3)))
    # far to near so nearer shapes occlude
    shapes.sort(key=lambda s: -s[0])
    colour = np.empty((H, W, 3))
    pal = _palette(K)
    colour[:] = pal[0] + 0.08 * np.sin(xx / 3.0 + rng.uniform(0, 6))[..., None]
    for d, c, kind, cy, cx, ry, rx, jitter in shapes:
        if kind == 0:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            inside = (np.abs(yy - cy) <= ry * 0.8) & (np.abs(xx - cx) <= rx * 0.8)
        label[inside] = c
        depth = np.where(inside, d, depth)
        colour[inside] = pal[c] + jitter

    rgb = np.clip(colour + rng.normal(0, 0.03, colour.shape), 0, 1).transpose(2, 0, 1)
    depth_img = np.clip(depth + rng.normal(0, 0.01, depth.shape), 0, 1)
    depth_planes = np.stack([depth_img, depth_img ** 2, np.sqrt(depth_img)])

    edge = boundary_map(label)
    refl = np.array([_reflectance(c, K) for c in range(K)])[label]
    event = np.stack([
        edge.astype(np.float64),
        edge * refl,
        edge * (0.5 + 0.5 * np.sign(xx - W / 2 + 0.5)),
    ])

    hits = rng.random((H, W)) < 0.35
    lidar = np.stack([
        hits * depth_img,
        hits * np.clip(refl + rng.normal(0, 0.05, refl.shape), 0, 1),
        hits.astype(np.float64),
    ])

    mods = {
        "rgb": rgb,
        "depth": depth_planes,
        "event": event,
        "lidar": lidar,
    }
    return {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in mods.items()}, label


def apply_corruption(x: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Degrade one modality tensor. Severity 0 returns an exact copy."""
    s = float(spec.severity)
    if s == 0.0:
        return x.copy()
    if spec.kind == "gaussian-noise":
        out = x + rng.normal(0.0, 0.5 * s, x.shape)
    elif spec.kind == "blackout":
        out = x * (1.0 - s)
    elif spec.kind == "blur-proxy":
        blurred = ndimage.uniform_filter(x.astype(np.float64), size=(1, 7, 7), mode="nearest")
        out = (1.0 - s) * x + s * blurred
    elif spec.kind == "downsample-proxy":
        k = 1 + int(np.ceil(s * 5))
        H, W = x.shape[1:]
        coarse = x[:, ::k, ::k]
        out = np.repeat(np.repeat(coarse, k, axis=1), k, axis=2)[:, :H, :W]
    else:  # pragma: no cover - guarded by CorruptionSpec
        raise ValueError(spec.kind)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synthesize_one(seed: int, index: int, config: SceneConfig,
                   registry: Registry = DEFAULT_REGISTRY) -> ModalitySample:
    rng = np.random.default_rng([seed, index])
    mods, label = render_scene(rng, config)
    missing = set(registry.names) - set(mods)
    if missing:
        raise ConfigError(f"no renderer for modalities {sorted(missing)}")
    mods = {n: mods[n] for n in registry.names}
    spec = None
    if rng.random() < config.corruption_prob:
        target = registry.names[int(rng.integers(0, len(registry)))]
        kind = CORRUPTION_KINDS[int(rng.integers(0, len(CORRUPTION_KINDS)))]
        spec = CorruptionSpec(target, kind, float(rng.uniform(0.5, 1.0)))
        mods[target] = apply_corruption(mods[target], spec, rng)
    return ModalitySample(mods, label, seed=seed, corruption=spec, meta={"index": index})


def synthesize(seed: int, count: int, config: SceneConfig,
               registry: Registry = DEFAULT_REGISTRY) -> list[ModalitySample]:
    """Deterministic scenes; sample ``i`` depends only on ``(seed, i, config)``."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    return [synthesize_one(seed, i, config, registry) for i in range(count)]


def restrict(sample: ModalitySample, subset: Iterable[str],
             registry: Registry = DEFAULT_REGISTRY) -> ModalitySample:
    names = registry.ordered(subset)
    if not names:
        raise ValueError("modality subset must be non-empty")
    absent = [n for n in names if n not in sample.modalities]
    if absent:
        raise ValueError(f"sample lacks modalities {absent}")
    return replace(sample, modalities={n: sample.modalities[n] for n in names})


# --------------------------------------------------------------------------- binary format

_HEAD = struct.Struct("<4sHHIIB")


def header_size(names: Sequence[str]) -> int:
    return _HEAD.size + sum(1 + len(n.encode("utf-8")) for n in names)


def encode_sample(sample: ModalitySample, classes: int, registry: Registry = DEFAULT_REGISTRY) -> bytes:
    names = registry.ordered(sample.modalities)
    H, W = sample.label.shape
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, classes, H, W, len(names))]
    for n in names:
        raw = n.encode("utf-8")
        parts.append(struct.pack("<B", len(raw)) + raw)
    for n in names:
        x = sample.modalities[n]
        if x.shape != (3, H, W):
            raise ValueError(f"modality {n} has shape {x.shape}, expected {(3, H, W)}")
        parts.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
    if sample.label.size and (sample.label.min() < 0 or sample.label.max() >= classes):
        raise ValueError(f"label ids outside [0, {classes})")
    parts.append(np.ascontiguousarray(sample.label, dtype="<i4").tobytes())
    return b"".join(parts)


def decode_sample(blob: bytes, source: str = "<bytes>") -> tuple[ModalitySample, int]:
    if len(blob) < _HEAD.size:
        raise FormatError(f"{source}: truncated header")
    magic, version, K, H, W, count = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: format version {version} (expected {FORMAT_VERSION})")
    pos = _HEAD.size
    names = []
    for _ in range(count):
        if pos >= len(blob):
            raise FormatError(f"{source}: truncated modality table")
        n = blob[pos]
        raw = blob[pos + 1:pos + 1 + n]
        if len(raw) != n:
            raise FormatError(f"{source}: truncated modality name")
        names.append(raw.decode("utf-8"))
        pos += 1 + n
    plane = 3 * H * W * 4
    expected = pos + count * plane + H * W * 4
    if len(blob) != expected:
        raise FormatError(f"{source}: size {len(blob)} bytes, expected {expected} (truncated or trailing data)")
    mods = {}
    for n in names:
        mods[n] = np.frombuffer(blob, dtype="<f4", count=3 * H * W, offset=pos).reshape(3, H, W).astype(np.float32)
        pos += plane
    label = np.frombuffer(blob, dtype="<i4", count=H * W, offset=pos).reshape(H, W).astype(np.int32)
    if label.size and (label.min() < 0 or label.max() >= K):
        raise FormatError(f"{source}: label ids outside [0, {K})")
    return ModalitySample(mods, label), K


def _spec_to_json(spec: CorruptionSpec | None):
    if spec is None:
        return None
    return {"target": spec.target, "kind": spec.kind, "severity": spec.severity}


def save_samples(samples: Sequence[ModalitySample], directory: str | Path, classes: int,
                 registry: Registry = DEFAULT_REGISTRY, config: SceneConfig | None = None) -> Path:
    """Write one ``.magc`` file per sample plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    width = max(4, len(str(len(samples) - 1)))
    for i, s in enumerate(samples):
        name = f"sample_{i:0{width}d}.magc"
        (directory / name).write_bytes(encode_sample(s, classes, registry))
        entries.append({"file": name, "seed": s.seed, "corruption": _spec_to_json(s.corruption),
                        "meta": s.meta})
    manifest = {
        "format_version": FORMAT_VERSION,
        "classes": classes,
        "registry": list(registry.names),
        "config": config.as_dict() if config else None,
        "config_hash": config.digest() if config else None,
        "samples": entries,
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid manifest ({exc})") from exc


def load_samples(directory: str | Path) -> list[ModalitySample]:
    directory = Path(directory)
    if (directory / MANIFEST_NAME).exists():
        manifest = read_manifest(directory)
        entries = manifest["samples"]
    else:
        entries = [{"file": p.name} for p in sorted(directory.glob("*.magc"))]
    out = []
    for e in entries:
        path = directory / e["file"]
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        sample, _ = decode_sample(blob, str(path))
        sample.seed = e.get("seed")
        c = e.get("corruption")
        sample.corruption = CorruptionSpec(**c) if c else None
        sample.meta = e.get("meta") or {}
        out.append(sample)
    return out


def dataset_classes(directory: str | Path) -> int:
    return int(read_manifest(directory)["classes"])
