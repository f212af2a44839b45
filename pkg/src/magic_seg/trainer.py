"""Training loop: encode, aggregate, select, three losses, AdamW with warmup + poly decay."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .asm import RankingResult, SupervisionMask, build_mask, consistency_pair, rank_modalities
from .config import ConfigError, format_kv, read_kv, to_bool, to_int_list
from .data import ModalitySample
from .losses import LossBreakdown, NonFiniteError, loss_c, loss_m, loss_s, total_loss
from .mam import DEFAULT_POOLING, MamSwitches, mam_forward_ranked
from .model import MagicNet, ModelConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "l_m", "l_s", "l_c", "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    warmup_epochs: int = 10
    warmup_factor: float = 0.1
    base_lr: float = 6e-5
    poly_power: float = 0.9
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 1
    lam: float = 0.05
    beta: float = 2.0
    seed: int = 0
    dim: int = 16
    pooling_sizes: tuple[int, ...] = DEFAULT_POOLING
    use_residual: bool = True
    use_pooling: bool = True
    use_mlp: bool = True
    use_asm: bool = True
    consistency_reference: str = "salient"
    checkpoint_every: int = 0

    # config-file spelling -> field; "lambda" is a keyword in Python
    _ALIASES = {"lambda": "lam"}

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}, {self.epochs}")
        for name in ("warmup_factor", "base_lr", "poly_power", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lam < 0 or self.beta < 0:
            raise ConfigError("lambda and beta must be >= 0")
        if self.consistency_reference not in ("salient", "semantic"):
            raise ConfigError(f"consistency_reference must be salient|semantic, got {self.consistency_reference!r}")

    def model_config(self, classes: int) -> ModelConfig:
        return ModelConfig(self.dim, classes, tuple(self.pooling_sizes),
                           MamSwitches(self.use_residual, self.use_pooling, self.use_mlp))

    def to_dict(self) -> dict[str, object]:
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            out[key] = getattr(self, f.name)
        return out

    def to_text(self) -> str:
        return format_kv(self.to_dict())

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs: dict[str, object] = {}
        for key, value in raw.items():
            name = cls._ALIASES.get(key, key)
            if name not in types:
                raise ConfigError(f"unknown train-config key {key!r}")
            typ = types[name]
            try:
                if typ == "bool":
                    kwargs[name] = to_bool(value, key)
                elif typ == "int":
                    kwargs[name] = int(value)
                elif typ == "float":
                    kwargs[name] = float(value)
                elif name == "pooling_sizes":
                    kwargs[name] = to_int_list(value, key)
                else:
                    kwargs[name] = value
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(read_kv(path))


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Constant ``warmup_factor * base_lr`` for the warmup share of steps, then poly decay."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be > 0, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = total_steps * config.warmup_epochs // config.epochs
    if step < warmup_steps:
        return config.warmup_factor * config.base_lr
    return config.base_lr * (1.0 - step / total_steps) ** config.poly_power


# --------------------------------------------------------------------------- one forward


@dataclass
class Frozen:
    """Non-differentiable decisions of a forward pass (ranking order, mask targets)."""

    order: tuple[str, ...] | None = None
    mask: SupervisionMask | None = None


@dataclass
class StepOutput:
    total: torch.Tensor
    l_m: torch.Tensor
    l_s: torch.Tensor
    l_c: torch.Tensor
    ranking: RankingResult | None
    mask: SupervisionMask | None
    frozen: Frozen


def _zero(ref: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=ref.dtype)


def forward_losses(model: MagicNet, inputs: dict, label, *, lam: float, beta: float, use_asm: bool = True,
                   reference: str = "salient", frozen: Frozen | None = None) -> StepOutput:
    """Composed training graph for one sample, all registry modalities present.

    Passing ``frozen`` reuses a previous ranking and mask, which is how the
    finite-difference checks hold the piecewise-constant parts fixed.
    """
    label = torch.as_tensor(np.asarray(label)).long()
    names = model.registry.ordered(inputs)
    feats = model.encode(inputs, names)
    semantic = model.aggregate(feats)
    H, W = label.shape
    pm = model.head(semantic.tensor, (H, W))
    l_m = loss_m(pm, label)
    l_s = l_c = _zero(l_m)
    ranking = mask = None
    new_frozen = Frozen()

    if use_asm and len(names) >= 2:
        if frozen is not None and frozen.order is not None:
            order = frozen.order
        else:
            ranking = rank_modalities(feats, semantic, model.registry)
            order = ranking.order
        new_frozen.order = order
        robust, fragile = order[0], order[-1]
        salient = mam_forward_ranked([feats[robust], feats[fragile]], model.asm_mam)
        ps = model.head(salient.tensor, (H, W))
        mask = frozen.mask if frozen is not None and frozen.mask is not None else build_mask(pm, label)
        new_frozen.mask = mask
        l_s = loss_s(ps, mask)
        remaining = order[1:-1]
        if len(remaining) >= 2:
            ref = salient.tensor if reference == "salient" else semantic.tensor
            l_c = loss_c(consistency_pair([feats[remaining[0]], feats[remaining[1]]], ref))

    total = l_m + lam * l_s + beta * l_c
    return StepOutput(total, l_m, l_s, l_c, ranking, mask, new_frozen)


# --------------------------------------------------------------------------- state + steps


@dataclass
class TrainState:
    model: MagicNet
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    log: list[dict] = field(default_factory=list)
    rankings: list[dict] = field(default_factory=list)


def make_optimizer(model: MagicNet, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=config.base_lr, betas=(config.beta1, config.beta2),
                             eps=config.adam_eps, weight_decay=config.weight_decay)


def init_state(config: TrainConfig, classes: int, registry=None) -> TrainState:
    kwargs = {} if registry is None else {"registry": registry}
    model = MagicNet.seeded(config.seed, config.model_config(classes), **kwargs)
    return TrainState(model, make_optimizer(model, config), config)


def train_step(state: TrainState, batch: Sequence[ModalitySample], total_steps: int) -> LossBreakdown:
    """One optimizer step on ``batch`` (losses averaged over its samples)."""
    cfg = state.config
    model = state.model
    lr = lr_at(state.step, total_steps, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)

    sums = {"total": 0.0, "l_m": 0.0, "l_s": 0.0, "l_c": 0.0}
    outs = []
    for sample in batch:
        missing = set(model.registry.names) - set(sample.modalities)
        if missing:
            raise ValueError(f"training sample lacks modalities {sorted(missing)}")
        out = forward_losses(model, sample.modalities, sample.label, lam=cfg.lam, beta=cfg.beta,
                             use_asm=cfg.use_asm, reference=cfg.consistency_reference)
        for term in ("l_m", "l_s", "l_c", "total"):
            v = float(getattr(out, term).detach())
            if not math.isfinite(v):
                raise NonFiniteError(f"non-finite {term} at step {state.step}")
            sums[term] += v
        (out.total / len(batch)).backward()
        outs.append(out)
    state.optimizer.step()

    n = len(batch)
    breakdown = total_loss(sums["l_m"] / n, sums["l_s"] / n, sums["l_c"] / n, cfg.lam, cfg.beta)
    state.log.append({"step": state.step, "epoch": state.epoch, **breakdown.as_row(), "lr": lr})
    for out in outs:
        if out.ranking is not None:
            r = out.ranking
            row = {"step": state.step}
            row.update({f"score_{n}": r.scores[n] for n in model.registry.names if n in r.scores})
            row["robust"], row["fragile"] = r.selected
            state.rankings.append(row)
    state.step += 1
    return breakdown


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(dataset: Sequence[ModalitySample], config: TrainConfig, classes: int, *,
          state: TrainState | None = None, out_dir: str | Path | None = None,
          stop_after: int | None = None,
          on_step: Callable[[TrainState, LossBreakdown], None] | None = None) -> TrainState:
    """Run (or resume) training to the end of the schedule.

    ``stop_after`` halts once the global step counter reaches that value,
    which the resume tests use to cut a run short.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    state = state or init_state(config, classes)
    per_epoch = steps_per_epoch(len(dataset), config.batch_size)
    total = per_epoch * config.epochs
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    while state.step < total:
        if stop_after is not None and state.step >= stop_after:
            break
        state.epoch = state.step // per_epoch
        order = epoch_order(config.seed, state.epoch, len(dataset))
        b = state.step % per_epoch
        idx = order[b * config.batch_size:(b + 1) * config.batch_size]
        breakdown = train_step(state, [dataset[i] for i in idx], total)
        if on_step is not None:
            on_step(state, breakdown)
        if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(state, out_dir / f"ckpt_step{state.step:06d}.magp")
            write_log(state, out_dir / "train_log.csv")
            write_rankings(state, out_dir / "rankings.csv")
    if out_dir is not None:
        save_checkpoint(state, out_dir / "final.magp")
        write_log(state, out_dir / "train_log.csv")
        write_rankings(state, out_dir / "rankings.csv")
    return state


# --------------------------------------------------------------------------- persistence


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    params = state.model.named_groups()
    extra: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, p in params.items():
        st = state.optimizer.state.get(p)
        if not st:
            continue
        extra[f"opt/{name}/step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(())
        extra[f"opt/{name}/exp_avg"] = st["exp_avg"]
        extra[f"opt/{name}/exp_avg_sq"] = st["exp_avg_sq"]
    state.model.save(path, extra=extra, step=state.step, epoch=state.epoch)


def load_checkpoint(path: str | Path, config: TrainConfig) -> TrainState:
    model, pf = MagicNet.load(path)
    if model.config != config.model_config(model.config.classes):
        raise ConfigError(f"{path}: checkpoint model config does not match the train config")
    opt = make_optimizer(model, config)
    for name, p in model.named_groups().items():
        key = f"opt/{name}/step"
        if key in pf.tensors:
            opt.state[p] = {
                "step": pf.tensors[key].clone(),
                "exp_avg": pf.tensors[f"opt/{name}/exp_avg"].clone(),
                "exp_avg_sq": pf.tensors[f"opt/{name}/exp_avg_sq"].clone(),
            }
    return TrainState(model, opt, config, step=pf.step, epoch=pf.epoch)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def log_header(config: TrainConfig) -> str:
    return f"# lambda={config.lam:g} beta={config.beta:g} base_lr={config.base_lr:g} seed={config.seed}\n"


def write_log(state: TrainState, path: str | Path) -> None:
    buf = io.StringIO()
    buf.write(log_header(state.config))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in state.log:
        w.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def restore_logs(state: TrainState, directory: str | Path) -> None:
    """Reload log rows written before ``state.step`` (for resumed runs)."""
    directory = Path(directory)
    if (directory / "train_log.csv").exists():
        state.log = [r for r in read_log(directory / "train_log.csv") if r["step"] < state.step]
    if (directory / "rankings.csv").exists():
        rows = []
        for r in read_rankings(directory / "rankings.csv"):
            if r["step"] < state.step:
                rows.append(r)
        state.rankings = rows


def read_rankings(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for k, v in r.items():
                if k == "step":
                    row[k] = int(v)
                elif k.startswith("score_"):
                    if v != "":
                        row[k] = float(v)
                else:
                    row[k] = v
            rows.append(row)
    return rows


def read_log(path: str | Path) -> list[dict]:
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if not l.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append({k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()})
    return rows


def write_rankings(state: TrainState, path: str | Path) -> None:
    names = state.model.registry.names
    cols = ["step"] + [f"score_{n}" for n in names] + ["robust", "fragile"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in state.rankings:
        w.writerow([_fmt(row.get(c, "")) for c in cols])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
