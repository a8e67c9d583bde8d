"""Linear probing, supervised finetuning and multi-clip video-level inference."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import VideoTransformer
from .errors import ConfigError, ProtocolError
from .trainer import OptimizerState, lr_at, optimizer_step
from .videogen import AugmentConfig, ClipSpec, Video, augment, extract_clip


@dataclass
class EvalReport:
    top1: float
    per_class: dict[int, float]
    n_videos: int
    n_clips: int
    stride: int
    frames: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


class Classifier(nn.Module):
    """Backbone followed by a linear head producing class logits."""

    def __init__(self, backbone: nn.Module, feature_dim: int, k_classes: int):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, k_classes)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(clips))


def clip_starts(t_total: int, span: int, n_clips: int) -> list[int]:
    """Evenly spaced starts over ``[0, t_total - span]``; a single clip is centred."""
    if span > t_total:
        raise ProtocolError(f"video of {t_total} frames is shorter than one clip span ({span})")
    last = t_total - span
    if n_clips == 1:
        return [last // 2]
    return [int(round(s)) for s in np.linspace(0, last, n_clips)]


def center_crop(clip: np.ndarray, size: tuple[int, int] | None = None) -> np.ndarray:
    if size is None:
        return clip
    h, w = clip.shape[1:3]
    top, left = (h - size[0]) // 2, (w - size[1]) // 2
    return clip[:, top:top + size[0], left:left + size[1]]


def video_clips(video: Video, n_clips: int, stride: int, frames: int) -> torch.Tensor:
    span = ClipSpec(0, stride, frames).span()
    clips = [center_crop(extract_clip(video, ClipSpec(s, stride, frames))) for s in clip_starts(video.t_total, span, n_clips)]
    return torch.from_numpy(np.stack(clips))


@torch.no_grad()
def aggregate_inference(model: Callable[[torch.Tensor], torch.Tensor], video: Video, n_clips: int = 5,
                        stride: int = 2, frames: int = 4) -> np.ndarray:
    """Arithmetic mean of per-clip softmax scores over ``n_clips`` evenly spaced clips.

    Clips run one at a time so a clip's scores never depend on its batch
    neighbours, and the float32 scores are averaged in float64, which makes the
    mean of identical clips exactly equal to a single clip's scores.
    """
    clips = video_clips(video, n_clips, stride, frames)
    probs = torch.stack([torch.softmax(model(c[None]), dim=-1)[0] for c in clips])
    return probs.double().mean(dim=0).numpy()


@torch.no_grad()
def evaluate(model: Callable[[torch.Tensor], torch.Tensor], videos: Sequence[Video], k_classes: int,
             n_clips: int = 5, stride: int = 2, frames: int = 4) -> EvalReport:
    preds = np.array([int(np.argmax(aggregate_inference(model, v, n_clips, stride, frames))) for v in videos])
    labels = np.array([v.label for v in videos])
    per_class = {c: float(np.mean(preds[labels == c] == c)) for c in range(k_classes) if np.any(labels == c)}
    return EvalReport(float(np.mean(preds == labels)), per_class, len(videos), n_clips, stride, frames)


def _random_clips(videos: Sequence[Video], stride: int, frames: int, rng: np.random.Generator,
                  aug: AugmentConfig | None = None) -> torch.Tensor:
    span = ClipSpec(0, stride, frames).span()
    out = []
    for v in videos:
        if span > v.t_total:
            raise ProtocolError(f"video of {v.t_total} frames is shorter than one clip span ({span})")
        clip = extract_clip(v, ClipSpec(int(rng.integers(0, v.t_total - span + 1)), stride, frames))
        out.append(augment(clip, rng, aug) if aug is not None else clip)
    return torch.from_numpy(np.stack(out))


@torch.no_grad()
def _features(backbone: nn.Module, clips: torch.Tensor, batch: int = 256) -> torch.Tensor:
    return torch.cat([backbone(clips[i:i + batch]) for i in range(0, len(clips), batch)])


def _check_labels(videos: Sequence[Video], k_classes: int) -> None:
    if not videos:
        raise ConfigError("empty labelled corpus")
    top = max(v.label for v in videos)
    if top >= k_classes:
        raise ConfigError(f"corpus has label {top} but the head has {k_classes} classes")


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 20
    lr: float = 1e-2
    batch_size: int = 64
    stride: int = 2
    frames: int = 4
    n_clips: int = 5
    seed: int = 0


def linear_probe(backbone: nn.Module, train: Sequence[Video], test: Sequence[Video], k_classes: int,
                 cfg: ProbeConfig = ProbeConfig(), feature_dim: int | None = None) -> tuple[nn.Linear, EvalReport, EvalReport]:
    """Train a linear head on frozen features; returns head and train/test reports.

    The backbone runs in inference mode only, so its parameters are untouched.
    """
    _check_labels(train, k_classes)
    rng = np.random.default_rng([cfg.seed, 7])
    torch.manual_seed(cfg.seed)
    if feature_dim is None:
        feature_dim = getattr(backbone, "out_dim")
    head = nn.Linear(feature_dim, k_classes)
    params = dict(head.named_parameters())
    opt = OptimizerState(weight_decay=0.0)
    labels = torch.tensor([v.label for v in train])
    mean = std = None
    for _ in range(cfg.epochs):
        feats = _features(backbone, _random_clips(train, cfg.stride, cfg.frames, rng))
        if mean is None:
            # standardize with first-epoch statistics; folded into the head below
            mean, std = feats.mean(0), feats.std(0).clamp_min(1e-6)
        feats = (feats - mean) / std
        order = rng.permutation(len(train))
        for i in range(0, len(train), cfg.batch_size):
            idx = torch.from_numpy(order[i:i + cfg.batch_size])
            head.zero_grad(set_to_none=True)
            F.cross_entropy(head(feats[idx]), labels[idx]).backward()
            optimizer_step(params, {n: p.grad for n, p in params.items()}, opt, cfg.lr)
    if mean is not None:
        with torch.no_grad():
            head.weight.div_(std)
            head.bias.sub_(head.weight @ mean)

    def model(clips):
        return head(backbone(clips))

    args = (k_classes, cfg.n_clips, cfg.stride, cfg.frames)
    return head, evaluate(model, train, *args), evaluate(model, test, *args)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 10
    warmup_epochs: int = 2
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.05
    stride: int = 2
    frames: int = 4
    n_clips: int = 5
    seed: int = 0
    augment: AugmentConfig = AugmentConfig()

    def __post_init__(self):
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", AugmentConfig(**self.augment))
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be < epochs")


def finetune(backbone: VideoTransformer, train: Sequence[Video], test: Sequence[Video], k_classes: int,
             cfg: FinetuneConfig = FinetuneConfig()) -> tuple[Classifier, EvalReport]:
    """End-to-end supervised training of a copy of ``backbone`` plus a linear head."""
    _check_labels(train, k_classes)
    torch.manual_seed(cfg.seed)
    model = Classifier(copy.deepcopy(backbone), backbone.out_dim, k_classes)
    for p in model.parameters():
        p.requires_grad_(True)
    params = dict(model.named_parameters())
    opt = OptimizerState(weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 11])
    labels = torch.tensor([v.label for v in train])
    steps_per_epoch = max(1, len(train) // cfg.batch_size)
    total, warmup = cfg.epochs * steps_per_epoch, cfg.warmup_epochs * steps_per_epoch
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            clips = _random_clips([train[i] for i in idx], cfg.stride, cfg.frames, rng, cfg.augment)
            model.zero_grad(set_to_none=True)
            F.cross_entropy(model(clips), labels[torch.from_numpy(idx)]).backward()
            lr = lr_at(epoch * steps_per_epoch + b, total, warmup, cfg.lr)
            optimizer_step(params, {n: p.grad for n, p in params.items()}, opt, lr)
    model.eval()
    return model, evaluate(model, test, k_classes, cfg.n_clips, cfg.stride, cfg.frames)
