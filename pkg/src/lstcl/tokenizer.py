"""Patch extraction, linear/positional embedding and the token-grid container."""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import nn

from .errors import ShapeError


@dataclass
class TokenGrid:
    """Embedded tokens laid out as ``(B, T, H_p, W_p, D)`` plus an optional class token ``(B, D)``.

    The canonical flat order is t-major, then row, then column, with the class
    token (if any) in front.
    """

    tokens: torch.Tensor
    class_token: torch.Tensor | None = None
    patch: int | None = None

    @property
    def layout(self) -> tuple[int, int, int, int]:
        return tuple(self.tokens.shape[-4:])  # type: ignore[return-value]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def to_sequence(self) -> torch.Tensor:
        b = self.tokens.shape[0]
        seq = self.tokens.reshape(b, -1, self.dim)
        if self.class_token is not None:
            seq = torch.cat([self.class_token[:, None, :], seq], dim=1)
        return seq

    @classmethod
    def from_sequence(cls, seq: torch.Tensor, layout: tuple[int, int, int], has_class_token: bool,
                      patch: int | None = None) -> "TokenGrid":
        t, hp, wp = layout
        cls_tok = None
        if has_class_token:
            cls_tok, seq = seq[:, 0], seq[:, 1:]
        if seq.shape[1] != t * hp * wp:
            raise ShapeError(f"sequence of {seq.shape[1]} tokens does not match layout {layout}")
        return cls(seq.reshape(seq.shape[0], t, hp, wp, seq.shape[-1]), cls_tok, patch)

    def with_tokens(self, tokens: torch.Tensor, class_token: torch.Tensor | None = None) -> "TokenGrid":
        return replace(self, tokens=tokens, class_token=class_token)


def patchify(clip: torch.Tensor, patch: int) -> torch.Tensor:
    """``(..., T, H, W, C)`` -> ``(..., T, H/P, W/P, P*P*C)``; each vector is a row-major P x P x C patch."""
    *lead, t, h, w, c = clip.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide frame {h}x{w}")
    hp, wp = h // patch, w // patch
    x = clip.reshape(*lead, t, hp, patch, wp, patch, c)
    n = len(lead)
    x = x.permute(*range(n), n, n + 1, n + 3, n + 2, n + 4, n + 5)
    return x.reshape(*lead, t, hp, wp, patch * patch * c)


def unpatchify(patches: torch.Tensor, patch: int, channels: int) -> torch.Tensor:
    *lead, t, hp, wp, k = patches.shape
    if k != patch * patch * channels:
        raise ShapeError(f"patch vector length {k} != {patch}*{patch}*{channels}")
    x = patches.reshape(*lead, t, hp, wp, patch, patch, channels)
    n = len(lead)
    x = x.permute(*range(n), n, n + 1, n + 3, n + 2, n + 4, n + 5)
    return x.reshape(*lead, t, hp * patch, wp * patch, channels)


class PatchEmbed(nn.Module):
    """``z_(i,t) = W p_(i,t) + e_(i,t)`` with an optional learnable class token.

    With ``absolute_pos=False`` no positional term is added; position then has to
    come from relative biases inside the attention blocks.
    """

    def __init__(self, patch: int, channels: int, dim: int, frames: int, grid: tuple[int, int],
                 absolute_pos: bool = True, class_token: bool = True):
        super().__init__()
        if dim <= 0:
            raise ShapeError("embedding dim must be positive")
        self.patch, self.channels, self.dim = patch, channels, dim
        self.frames, self.grid = frames, tuple(grid)
        self.weight = nn.Parameter(torch.empty(dim, patch * patch * channels))
        nn.init.trunc_normal_(self.weight, std=(patch * patch * channels) ** -0.5)
        n_tokens = frames * grid[0] * grid[1] + (1 if class_token else 0)
        self.pos = nn.Parameter(torch.randn(n_tokens, dim) * 0.02) if absolute_pos else None
        self.cls = nn.Parameter(torch.randn(dim) * 0.02) if class_token else None

    def forward(self, patches: torch.Tensor) -> TokenGrid:
        b, t, hp, wp, k = patches.shape
        if (t, hp, wp) != (self.frames, *self.grid) or k != self.weight.shape[1]:
            raise ShapeError(
                f"patches {tuple(patches.shape[1:])} do not match embedding layout "
                f"({self.frames}, {self.grid[0]}, {self.grid[1]}, {self.weight.shape[1]})"
            )
        tokens = patches @ self.weight.T
        cls_tok = None
        if self.cls is not None:
            cls_tok = self.cls.expand(b, -1)
        if self.pos is not None:
            offset = 1 if self.cls is not None else 0
            tokens = tokens + self.pos[offset:].reshape(t, hp, wp, self.dim)
            if cls_tok is not None:
                cls_tok = cls_tok + self.pos[0]
        return TokenGrid(tokens, cls_tok, self.patch)


def embed(patches: torch.Tensor, params: PatchEmbed) -> TokenGrid:
    return params(patches)
