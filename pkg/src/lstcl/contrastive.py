"""Long-short contrastive objectives, encoders and momentum updates."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass
from typing import Mapping, MutableMapping

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig, VideoTransformer
from .errors import ConfigError, NumericError, ParameterMapError


class Framework(str, enum.Enum):
    INFONCE = "infonce"
    BYOL = "byol"
    SIMSIAM = "simsiam"

    @property
    def uses_momentum(self) -> bool:
        return self is not Framework.SIMSIAM


@dataclass(frozen=True)
class LossConfig:
    framework: Framework = Framework.INFONCE
    temperature: float = 0.2
    momentum: float = 0.99
    symmetrize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "framework", Framework(self.framework))
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {self.momentum}")


class Head(nn.Module):
    """Two-layer perceptron ``in -> 4*in -> out``, optionally batch-normalised after the hidden layer.

    Batch norm removes the component shared by every sample; without it the
    keys start nearly parallel and the contrastive gradient is tiny.
    """

    def __init__(self, in_dim: int, out_dim: int, ratio: int = 4, norm: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, ratio * in_dim)
        self.bn = nn.BatchNorm1d(ratio * in_dim) if norm else None
        self.fc2 = nn.Linear(ratio * in_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.fc1(x)
        if self.bn is not None:
            h = self.bn(h)
        return self.fc2(F.relu(h))


class Encoder(nn.Module):
    """Backbone + projector, with a predictor on the online (query) side only."""

    def __init__(self, backbone: VideoTransformer, proj_dim: int = 32, predictor: bool = True,
                 head_norm: bool = True):
        super().__init__()
        self.backbone = backbone
        self.projector = Head(backbone.out_dim, proj_dim, norm=head_norm)
        self.predictor = Head(proj_dim, proj_dim, norm=head_norm) if predictor else None

    @classmethod
    def build(cls, cfg: BackboneConfig, proj_dim: int = 32, predictor: bool = True,
              head_norm: bool = True) -> "Encoder":
        return cls(VideoTransformer(cfg), proj_dim, predictor, head_norm)

    def key_copy(self) -> "Encoder":
        """Exact clone without the predictor, detached from autograd."""
        twin = copy.deepcopy(self)
        twin.predictor = None
        for p in twin.parameters():
            p.requires_grad_(False)
        return twin

    def project(self, clips: torch.Tensor) -> torch.Tensor:
        return self.projector(self.backbone(clips))


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-normalise without an epsilon; rows with norm below ``eps`` raise."""
    norm = x.norm(dim=-1, keepdim=True)
    if not torch.isfinite(norm).all():
        raise NumericError("non-finite vector in normalisation")
    if (norm < eps).any():
        raise NumericError("cannot normalise a vector with norm < 1e-12")
    return x / norm


def encode_query(encoder: Encoder, clips: torch.Tensor) -> torch.Tensor:
    if encoder.predictor is None:
        raise ConfigError("query encoder needs a predictor head")
    return l2_normalize(encoder.predictor(encoder.project(clips)))


def encode_key(encoder: Encoder, clips: torch.Tensor) -> torch.Tensor:
    """Projector output, normalised, under stop-gradient."""
    with torch.no_grad():
        return l2_normalize(encoder.project(clips))


def _check_finite(*xs: torch.Tensor) -> None:
    for x in xs:
        if not torch.isfinite(x).all():
            raise NumericError("non-finite input to loss")


def _reduce(terms: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return terms.sum()
    if reduction == "mean":
        return terms.mean()
    if reduction == "none":
        return terms
    raise ValueError(f"unknown reduction {reduction!r}")


def info_nce(q: torch.Tensor, k: torch.Tensor, temperature: float, reduction: str = "sum") -> torch.Tensor:
    """Cross-entropy of picking ``k[i]`` for ``q[i]`` among all keys in the batch."""
    _check_finite(q, k)
    logits = q @ k.T / temperature
    target = torch.arange(q.shape[0], device=q.device)
    return _reduce(F.cross_entropy(logits, target, reduction="none"), reduction)


def byol_loss(p: torch.Tensor, k: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """``sum_i 2 - 2 cos(p_i, k_i)``; positives only."""
    _check_finite(p, k)
    terms = 2.0 - 2.0 * (l2_normalize(p) * l2_normalize(k)).sum(dim=-1)
    return _reduce(terms, reduction)


def simsiam_loss(p: torch.Tensor, k: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    return byol_loss(p, k.detach(), reduction)


def pair_loss(q: torch.Tensor, k: torch.Tensor, cfg: LossConfig, reduction: str = "sum") -> torch.Tensor:
    if cfg.framework is Framework.INFONCE:
        return info_nce(q, k, cfg.temperature, reduction)
    if cfg.framework is Framework.BYOL:
        return byol_loss(q, k, reduction)
    return simsiam_loss(q, k, reduction)


def _key_encoder(online: Encoder, momentum: Encoder | None, cfg: LossConfig) -> Encoder:
    if cfg.framework.uses_momentum:
        if momentum is None:
            raise ConfigError(f"{cfg.framework.value} requires a momentum encoder")
        return momentum
    if momentum is not None:
        raise ConfigError("simsiam uses the online encoder for keys; pass momentum=None")
    return online


def lstcl_loss(online: Encoder, momentum: Encoder | None, short: torch.Tensor, long: torch.Tensor,
               cfg: LossConfig, reduction: str = "mean") -> torch.Tensor:
    """``L(Q(short), K(long))`` plus, when symmetrised, ``L(Q(long), K(short))``."""
    key_enc = _key_encoder(online, momentum, cfg)
    loss = pair_loss(encode_query(online, short), encode_key(key_enc, long), cfg, reduction)
    if cfg.symmetrize:
        loss = loss + pair_loss(encode_query(online, long), encode_key(key_enc, short), cfg, reduction)
    return loss


def symmetrized_step(online: Encoder, momentum: Encoder | None, short: torch.Tensor, long: torch.Tensor,
                     cfg: LossConfig, reduction: str = "mean") -> tuple[float, dict[str, torch.Tensor]]:
    """Loss value and gradients of the online parameters (names -> tensors)."""
    online.zero_grad(set_to_none=True)
    loss = lstcl_loss(online, momentum, short, long, cfg, reduction)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for n, p in online.named_parameters()}
    return float(loss.detach()), grads


def _as_map(params: nn.Module | Mapping[str, torch.Tensor]) -> Mapping[str, torch.Tensor]:
    if isinstance(params, nn.Module):
        return dict(params.named_parameters())
    return params


def shared_names(online: nn.Module | Mapping[str, torch.Tensor]) -> list[str]:
    return [n for n in _as_map(online) if not n.startswith("predictor.")]


@torch.no_grad()
def momentum_update(online: nn.Module | Mapping[str, torch.Tensor],
                    momentum: nn.Module | MutableMapping[str, torch.Tensor], m: float) -> None:
    """In place: ``theta_m <- m * theta_m + (1 - m) * theta`` for every shared name."""
    src, dst = _as_map(online), _as_map(momentum)
    names = set(shared_names(src))
    if names != set(dst):
        missing = sorted(names ^ set(dst))
        raise ParameterMapError(f"online/momentum parameter names differ: {missing[:5]}")
    for name in sorted(names):
        a, b = dst[name], src[name]
        if a.shape != b.shape:
            raise ParameterMapError(f"{name}: shape {tuple(a.shape)} != {tuple(b.shape)}")
        a.copy_(m * a + (1.0 - m) * b.detach())
