"""AdamW, warm-up + cosine schedule, and the long-short pretraining loop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .backbone import BackboneConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .contrastive import Encoder, LossConfig, momentum_update, symmetrized_step
from .errors import ConfigError, ParameterMapError
from .videogen import AugmentConfig, ClipSpec, Strategy, Video, augment, extract_clip, sample_pair

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "lr", "loss", "wall_ms")


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_peak: float) -> float:
    """Linear warm-up to ``lr_peak`` then half-cosine decay to zero at ``total_steps``."""
    if not 0 <= warmup_steps < total_steps:
        raise ConfigError(f"need 0 <= warmup_steps < total_steps, got {warmup_steps}, {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return lr_peak * (step + 1) / warmup_steps
    phase = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * phase))


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {f"opt.exp_avg.{k}": v for k, v in self.exp_avg.items()}
        out.update({f"opt.exp_avg_sq.{k}": v for k, v in self.exp_avg_sq.items()})
        return out

    def hyper(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}

    @classmethod
    def restore(cls, hyper: dict, tensors: Mapping[str, torch.Tensor]) -> "OptimizerState":
        st = cls(**hyper)
        for k, v in tensors.items():
            if k.startswith("opt.exp_avg_sq."):
                st.exp_avg_sq[k[len("opt.exp_avg_sq."):]] = v.clone()
            elif k.startswith("opt.exp_avg."):
                st.exp_avg[k[len("opt.exp_avg."):]] = v.clone()
        return st


@torch.no_grad()
def optimizer_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
                   state: OptimizerState, lr: float) -> None:
    """One AdamW step in place: decoupled decay, then bias-corrected moment update."""
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    if set(params) != set(grads):
        raise ParameterMapError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))[:5]}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ParameterMapError(f"{name}: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        if m.shape != p.shape:
            raise ParameterMapError(f"{name}: moment shape mismatch")
        p.mul_(1.0 - lr * state.weight_decay)
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 6
    base_lr: float = 1e-2
    batch_size: int = 32
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = LossConfig()
    stride_short: int = 2
    stride_long: int = 8
    strategy: Strategy = Strategy.INDEPENDENT
    backbone: BackboneConfig = BackboneConfig()
    proj_dim: int = 32
    head_norm: bool = True
    augment: AugmentConfig = AugmentConfig()
    checkpoint_dir: str | None = None
    metrics_path: str | None = None
    checkpoint_every: int = 1
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "betas", tuple(self.betas))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneConfig(**self.backbone))
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", AugmentConfig(**self.augment))
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be non-negative")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.stride_short < 1 or self.stride_long < self.stride_short:
            raise ConfigError("need 1 <= stride_short <= stride_long")

    @property
    def lr_peak(self) -> float:
        return self.base_lr * self.batch_size / 256

    @property
    def frames(self) -> int:
        return self.backbone.frames

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d, default=lambda o: o.value if hasattr(o, "value") else str(o)))

    def config_hash(self) -> str:
        d = self.to_dict()
        for k in ("checkpoint_dir", "metrics_path", "threads"):
            d.pop(k, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def model_hash(self) -> str:
        shape = {"backbone": self.to_dict()["backbone"], "proj_dim": self.proj_dim, "head_norm": self.head_norm}
        return hashlib.sha256(json.dumps(shape, sort_keys=True).encode()).hexdigest()[:16]


def check_feasible(t_total: int, cfg: TrainConfig) -> None:
    long = ClipSpec(0, cfg.stride_long, cfg.frames).span()
    short = ClipSpec(0, cfg.stride_short, cfg.frames).span()
    if long > t_total:
        raise ConfigError(f"long clip spans {long} frames but videos have {t_total}")
    if cfg.strategy is Strategy.DISJOINT and long + short > t_total:
        raise ConfigError(f"disjoint sampling needs {long + short} frames, videos have {t_total}")


def build_encoders(cfg: TrainConfig) -> tuple[Encoder, Encoder | None]:
    torch.manual_seed(cfg.seed)
    online = Encoder.build(cfg.backbone, cfg.proj_dim, predictor=True, head_norm=cfg.head_norm)
    momentum = online.key_copy() if cfg.loss.framework.uses_momentum else None
    return online, momentum


def make_batch(videos: Sequence[Video], cfg: TrainConfig, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    shorts, longs = [], []
    for v in videos:
        s, l = sample_pair(v.t_total, cfg.frames, cfg.stride_short, cfg.stride_long, cfg.strategy, rng)
        shorts.append(augment(extract_clip(v, s), rng, cfg.augment))
        longs.append(augment(extract_clip(v, l), rng, cfg.augment))
    return torch.from_numpy(np.stack(shorts)), torch.from_numpy(np.stack(longs))


class MetricsWriter:
    def __init__(self, path: str | Path | None, append: bool = False):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not (append and self.path.exists()):
                with open(self.path, "w", newline="") as fh:
                    csv.writer(fh).writerow(METRIC_FIELDS)

    def write(self, **row) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                                         for k in METRIC_FIELDS])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainResult:
    online: Encoder
    momentum: Encoder | None
    optimizer: OptimizerState
    metrics: list[dict]
    epoch: int

    @property
    def backbone(self):
        return self.online.backbone


def _checkpoint_tensors(online: Encoder, momentum: Encoder | None, opt: OptimizerState) -> dict[str, torch.Tensor]:
    out = {f"online.{k}": v for k, v in online.state_dict().items()}
    if momentum is not None:
        out.update({f"momentum.{k}": v for k, v in momentum.state_dict().items()})
    out.update(opt.tensors())
    return out


def save_training_state(directory: str | Path, cfg: TrainConfig, online: Encoder, momentum: Encoder | None,
                        opt: OptimizerState, epoch: int) -> str:
    meta = {"kind": "pretrain", "config_hash": cfg.config_hash(), "model_hash": cfg.model_hash(),
            "epoch": epoch, "step": opt.step, "optimizer": opt.hyper(), "config": cfg.to_dict()}
    return save_checkpoint(directory, _checkpoint_tensors(online, momentum, opt), meta)


def load_training_state(directory: str | Path, cfg: TrainConfig) -> tuple[Encoder, Encoder | None, OptimizerState, int]:
    tensors, meta = load_checkpoint(directory)
    if meta.get("model_hash") != cfg.model_hash():
        raise ConfigError("checkpoint model shape does not match the configuration")
    online, momentum = build_encoders(cfg)
    online.load_state_dict({k[len("online."):]: v for k, v in tensors.items() if k.startswith("online.")})
    if momentum is not None:
        momentum.load_state_dict({k[len("momentum."):]: v for k, v in tensors.items() if k.startswith("momentum.")})
    opt = OptimizerState.restore(meta["optimizer"], {k: v for k, v in tensors.items() if k.startswith("opt.")})
    return online, momentum, opt, int(meta["epoch"])


def pretrain(corpus: Sequence[Video], cfg: TrainConfig, resume_from: str | Path | None = None,
             stop_after_epoch: int | None = None) -> TrainResult:
    """Long-short contrastive pretraining.

    Every epoch draws its shuffling, clip sampling and augmentation from a
    generator seeded by ``(seed, epoch)``, so resuming from an epoch-boundary
    checkpoint replays exactly the same batches.
    """
    if not corpus:
        raise ConfigError("empty corpus")
    check_feasible(min(v.t_total for v in corpus), cfg)
    torch.set_num_threads(cfg.threads)
    if resume_from is not None:
        online, momentum, opt, start_epoch = load_training_state(resume_from, cfg)
    else:
        online, momentum = build_encoders(cfg)
        opt = OptimizerState(cfg.betas[0], cfg.betas[1], cfg.eps, cfg.weight_decay)
        start_epoch = 0
    metrics = MetricsWriter(cfg.metrics_path, append=resume_from is not None)

    n = len(corpus)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    params = dict(online.named_parameters())
    last = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)

    for epoch in range(start_epoch, last):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            t0 = time.perf_counter()
            step = epoch * steps_per_epoch + b
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            short, long = make_batch([corpus[i] for i in idx], cfg, rng)
            loss, grads = symmetrized_step(online, momentum, short, long, cfg.loss)
            lr = lr_at(step, total, warmup, cfg.lr_peak)
            optimizer_step(params, grads, opt, lr)
            if momentum is not None:
                momentum_update(online, momentum, cfg.loss.momentum)
            metrics.write(step=step, epoch=epoch, lr=lr, loss=loss,
                          wall_ms=round(1000 * (time.perf_counter() - t0), 3))
        if cfg.checkpoint_dir and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == last):
            save_training_state(cfg.checkpoint_dir, cfg, online, momentum, opt, epoch + 1)
        log.info("epoch %d loss %.4f", epoch, metrics.rows[-1]["loss"] if metrics.rows else float("nan"))

    if cfg.checkpoint_dir and last == start_epoch:
        save_training_state(cfg.checkpoint_dir, cfg, online, momentum, opt, start_epoch)
    return TrainResult(online, momentum, opt, metrics.rows, last)
