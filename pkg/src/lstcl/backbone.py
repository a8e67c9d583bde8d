"""Video transformer backbones: divided space-time attention and space-time shifted windows."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import AttentionError, ConfigError, ShapeError
from .tokenizer import PatchEmbed, TokenGrid, patchify


class Variant(str, enum.Enum):
    DIVIDED_ST = "divided_st"
    ST_SWIN = "st_swin"


class Readout(str, enum.Enum):
    CLASS_TOKEN = "class_token"
    MEAN_POOL = "mean_pool"


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row softmax over the last axis restricted to ``mask``; rows are shifted by their max."""
    if mask is not None:
        if (~mask).all(dim=-1).any():
            raise AttentionError("attention mask leaves a query with no admissible key")
        logits = logits.masked_fill(~mask, float("-inf"))
    logits = logits - logits.amax(dim=-1, keepdim=True).detach()
    w = torch.exp(logits)
    return w / w.sum(dim=-1, keepdim=True)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"heads={heads} does not divide dim={dim}")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.dim // self.heads).transpose(-2, -3)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None, bias: torch.Tensor | None = None,
                context: torch.Tensor | None = None) -> torch.Tensor:
        """Attend from ``x`` (..., N, D) to ``context`` (..., M, D), defaulting to ``x`` itself.

        ``mask`` is boolean (..., N, M) with True marking admissible keys; ``bias``
        is (heads, N, M) or broadcastable to the logits (..., heads, N, M).
        """
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.dim // self.heads)
        if bias is not None:
            logits = logits + bias
        if mask is not None:
            mask = mask.unsqueeze(-3)
        attn = masked_softmax(logits, mask)
        y = (attn @ v).transpose(-2, -3)
        return self.out(y.reshape(*y.shape[:-2], self.dim))


def mha(x: torch.Tensor, params: MultiHeadAttention, mask: torch.Tensor | None = None,
        bias: torch.Tensor | None = None) -> torch.Tensor:
    return params(x, mask=mask, bias=bias)


class MLP(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


# --------------------------------------------------------------------------
# divided space-time attention

class DividedBlock(nn.Module):
    """Temporal attention, then spatial attention, then MLP, each pre-norm with a residual.

    The class token skips the temporal stage (it has no spatial index) and in
    the spatial stage attends over itself and every patch token of every
    frame. Patch tokens never attend to the class token.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm_time = nn.LayerNorm(dim)
        self.attn_time = MultiHeadAttention(dim, heads)
        self.norm_space = nn.LayerNorm(dim)
        self.attn_space = MultiHeadAttention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, grid: TokenGrid) -> TokenGrid:
        if grid.class_token is None:
            raise ConfigError("divided space-time block requires a class token")
        x, cls = grid.tokens, grid.class_token
        b, t, hp, wp, d = x.shape

        h = self.norm_time(x).permute(0, 2, 3, 1, 4)  # (B, Hp, Wp, T, D)
        x = x + self.attn_time(h).permute(0, 3, 1, 2, 4)

        h = self.norm_space(x)
        hc = self.norm_space(cls)
        frames = h.reshape(b, t, hp * wp, d)
        x = x + self.attn_space(frames).reshape(b, t, hp, wp, d)
        everything = torch.cat([hc[:, None], h.reshape(b, -1, d)], dim=1)
        cls = cls + self.attn_space(hc[:, None], context=everything)[:, 0]

        x = x + self.mlp(self.norm_mlp(x))
        cls = cls + self.mlp(self.norm_mlp(cls))
        return grid.with_tokens(x, cls)


def divided_st_block(grid: TokenGrid, params: DividedBlock) -> TokenGrid:
    return params(grid)


def divided_masks(t: int, hp: int, wp: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Dense (1+N, 1+N) temporal and spatial masks in canonical token order.

    Index 0 is the class token. In the temporal mask the class token only sees
    itself (its temporal stage is the identity, handled separately).
    """
    n = t * hp * wp
    ti = torch.arange(n) // (hp * wp)
    si = torch.arange(n) % (hp * wp)
    temporal = torch.zeros(n + 1, n + 1, dtype=torch.bool)
    spatial = torch.zeros(n + 1, n + 1, dtype=torch.bool)
    temporal[1:, 1:] = si[:, None] == si[None, :]
    temporal[0, 0] = True
    spatial[1:, 1:] = ti[:, None] == ti[None, :]
    spatial[0, :] = True
    return temporal, spatial


# --------------------------------------------------------------------------
# shifted windows

@dataclass(frozen=True)
class WindowSpec:
    window: tuple[int, int]
    shift: tuple[int, int] = (0, 0)

    def validate(self, hp: int, wp: int) -> None:
        wh, ww = self.window
        sh, sw = self.shift
        if not (0 < wh <= hp and 0 < ww <= wp):
            raise ShapeError(f"window {self.window} larger than grid {(hp, wp)}")
        if hp % wh or wp % ww:
            raise ShapeError(f"window {self.window} does not tile grid {(hp, wp)}")
        if not (0 <= sh < wh and 0 <= sw < ww):
            raise ShapeError(f"shift {self.shift} must be smaller than window {self.window}")

    @property
    def shifted(self) -> bool:
        return any(self.shift)


@dataclass
class WindowIndex:
    """Maps window-ordered token slots back to canonical flat positions.

    ``perm[w, n]`` is the canonical flat index (t, h, w order) of slot ``n`` in
    window ``w``. ``local`` holds the (t, row, col) of each slot inside its
    window and ``mask`` (shifted partitions only) blocks pairs that were not
    neighbours before the cyclic shift.
    """

    perm: torch.Tensor
    local: torch.Tensor
    mask: torch.Tensor | None
    layout: tuple[int, int, int]


def build_window_index(t: int, hp: int, wp: int, spec: WindowSpec) -> WindowIndex:
    spec.validate(hp, wp)
    wh, ww = spec.window
    sh, sw = spec.shift
    nh, nw = hp // wh, wp // ww
    # slot (wi, wj, tt, a, c) sits at shifted position (wi*wh + a, wj*ww + c)
    wi, wj, tt, a, c = torch.meshgrid(
        torch.arange(nh), torch.arange(nw), torch.arange(t), torch.arange(wh), torch.arange(ww), indexing="ij"
    )
    row_s, col_s = wi * wh + a, wj * ww + c
    row, col = (row_s + sh) % hp, (col_s + sw) % wp
    perm = (tt * hp * wp + row * wp + col).reshape(nh * nw, -1)
    local = torch.stack([tt, a, c], dim=-1).reshape(nh * nw, -1, 3)
    mask = None
    if spec.shifted:
        region = ((row_s >= hp - sh) & (sh > 0)).long() * 2 + ((col_s >= wp - sw) & (sw > 0)).long()
        region = region.reshape(nh * nw, -1)
        mask = region[:, :, None] == region[:, None, :]
    return WindowIndex(perm, local, mask, (t, hp, wp))


def window_partition(grid: TokenGrid | torch.Tensor, spec: WindowSpec) -> tuple[torch.Tensor, WindowIndex]:
    """Split tokens ``(B, T, Hp, Wp, D)`` into windows ``(B, nW, T*wh*ww, D)``."""
    x = grid.tokens if isinstance(grid, TokenGrid) else grid
    b, t, hp, wp, d = x.shape
    index = build_window_index(t, hp, wp, spec)
    flat = x.reshape(b, -1, d)
    windows = flat[:, index.perm.reshape(-1)].reshape(b, *index.perm.shape, d)
    return windows, index


def window_reverse(windows: torch.Tensor, index: WindowIndex) -> torch.Tensor:
    b, d = windows.shape[0], windows.shape[-1]
    flat = torch.empty(b, index.perm.numel(), d, dtype=windows.dtype, device=windows.device)
    flat = flat.index_copy(1, index.perm.reshape(-1), windows.reshape(b, -1, d))
    return flat.reshape(b, *index.layout, d)


def relative_position_index(t: int, wh: int, ww: int, local: torch.Tensor | None = None) -> torch.Tensor:
    """(N, N) table index of the offset (dt, dh, dw) = coord_i - coord_j."""
    if local is None:
        tt, a, c = torch.meshgrid(torch.arange(t), torch.arange(wh), torch.arange(ww), indexing="ij")
        local = torch.stack([tt, a, c], dim=-1).reshape(-1, 3)
    rel = local[:, None, :] - local[None, :, :]
    rel = rel + torch.tensor([t - 1, wh - 1, ww - 1])
    return (rel[..., 0] * (2 * wh - 1) + rel[..., 1]) * (2 * ww - 1) + rel[..., 2]


class RelPosBias(nn.Module):
    """Learned per-head attention bias indexed by the 3D offset between two tokens of a window."""

    def __init__(self, frames: int, window: tuple[int, int], heads: int):
        super().__init__()
        wh, ww = window
        self.frames, self.window, self.heads = frames, (wh, ww), heads
        size = (2 * frames - 1) * (2 * wh - 1) * (2 * ww - 1)
        self.table = nn.Parameter(torch.randn(size, heads) * 0.02)
        self.register_buffer("index", relative_position_index(frames, wh, ww), persistent=False)

    def forward(self) -> torch.Tensor:
        n = self.index.shape[0]
        return self.table[self.index.reshape(-1)].reshape(n, n, self.heads).permute(2, 0, 1)


class SwinBlock(nn.Module):
    """One window-attention block: ``z + MHA_W(LN z)`` then ``z + MLP(LN z)``."""

    def __init__(self, dim: int, heads: int, frames: int, spec: WindowSpec, mlp_ratio: int = 4):
        super().__init__()
        self.spec = spec
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.rel_bias = RelPosBias(frames, spec.window, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, grid: TokenGrid) -> TokenGrid:
        x = grid.tokens
        windows, index = window_partition(self.norm_attn(x), self.spec)
        y = self.attn(windows, mask=index.mask, bias=self.rel_bias())
        x = x + window_reverse(y, index)
        x = x + self.mlp(self.norm_mlp(x))
        return grid.with_tokens(x, grid.class_token)


class SwinStage(nn.Module):
    """Alternating uniform / shifted window blocks; ``depth`` must be even."""

    def __init__(self, dim: int, heads: int, frames: int, grid: tuple[int, int], window: tuple[int, int],
                 depth: int = 2, mlp_ratio: int = 4):
        super().__init__()
        if depth < 2 or depth % 2:
            raise ConfigError("swin stage depth must be a positive even number")
        window = (min(window[0], grid[0]), min(window[1], grid[1]))
        uniform = WindowSpec(window)
        # no shift when a single window already covers the grid
        shift = tuple(w // 2 if w < g else 0 for w, g in zip(window, grid))
        shifted = WindowSpec(window, shift)  # type: ignore[arg-type]
        uniform.validate(*grid)
        shifted.validate(*grid)
        self.blocks = nn.ModuleList(
            SwinBlock(dim, heads, frames, shifted if i % 2 else uniform, mlp_ratio) for i in range(depth)
        )

    def forward(self, grid: TokenGrid) -> TokenGrid:
        for blk in self.blocks:
            grid = blk(grid)
        return grid


def st_swin_stage(grid: TokenGrid, params: SwinStage) -> TokenGrid:
    return params(grid)


class PatchMerge(nn.Module):
    """Concatenate each 2x2 spatial group (same frame) and project ``4D -> D_out``."""

    def __init__(self, dim: int, out_dim: int | None = None):
        super().__init__()
        self.reduction = nn.Linear(4 * dim, out_dim or 2 * dim, bias=False)

    def forward(self, grid: TokenGrid) -> TokenGrid:
        x = grid.tokens
        b, t, hp, wp, d = x.shape
        if hp % 2 or wp % 2:
            raise ShapeError(f"patch merging needs even spatial dims, got {hp}x{wp}")
        x = x.reshape(b, t, hp // 2, 2, wp // 2, 2, d).permute(0, 1, 2, 4, 3, 5, 6)
        x = x.reshape(b, t, hp // 2, wp // 2, 4 * d)
        return grid.with_tokens(self.reduction(x), grid.class_token)


def patch_merge(grid: TokenGrid, params: PatchMerge) -> TokenGrid:
    return params(grid)


# --------------------------------------------------------------------------
# whole backbone

@dataclass(frozen=True)
class BackboneConfig:
    variant: Variant = Variant.DIVIDED_ST
    frames: int = 4
    image_size: int = 16
    channels: int = 1
    patch: int = 4
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    window: tuple[int, int] = (2, 2)
    stage_depths: tuple[int, ...] = (2, 2)
    # fixed input standardisation, roughly the pixel statistics of the default corpus
    input_mean: float = 0.07
    input_std: float = 0.17

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "window", tuple(self.window))
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        if self.depth < 1 or not self.stage_depths:
            raise ConfigError("backbone depth must be >= 1")
        if self.image_size % self.patch:
            raise ShapeError(f"patch {self.patch} does not divide image size {self.image_size}")
        if self.dim % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide dim={self.dim}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch
        return g, g

    @property
    def out_dim(self) -> int:
        if self.variant is Variant.DIVIDED_ST:
            return self.dim
        return self.dim * 2 ** (len(self.stage_depths) - 1)

    @property
    def readout(self) -> Readout:
        return Readout.CLASS_TOKEN if self.variant is Variant.DIVIDED_ST else Readout.MEAN_POOL


class VideoTransformer(nn.Module):
    """Clip ``(B, T, H, W, C)`` -> feature ``(B, D_out)``."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        divided = cfg.variant is Variant.DIVIDED_ST
        self.embed = PatchEmbed(cfg.patch, cfg.channels, cfg.dim, cfg.frames, cfg.grid,
                                absolute_pos=divided, class_token=divided)
        if divided:
            self.blocks = nn.ModuleList(DividedBlock(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
            self.merges = nn.ModuleList()
        else:
            stages, merges = [], []
            dim, grid = cfg.dim, cfg.grid
            for i, depth in enumerate(cfg.stage_depths):
                if i:
                    merges.append(PatchMerge(dim, 2 * dim))
                    dim, grid = 2 * dim, (grid[0] // 2, grid[1] // 2)
                stages.append(SwinStage(dim, cfg.heads, cfg.frames, grid, cfg.window, depth, cfg.mlp_ratio))
            self.blocks = nn.ModuleList(stages)
            self.merges = nn.ModuleList(merges)
        self.norm = nn.LayerNorm(cfg.out_dim)

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def tokenize(self, clips: torch.Tensor) -> TokenGrid:
        clips = (clips - self.cfg.input_mean) / self.cfg.input_std
        return self.embed(patchify(clips, self.cfg.patch))

    def forward_grid(self, grid: TokenGrid) -> torch.Tensor:
        divided = self.cfg.variant is Variant.DIVIDED_ST
        if divided != (grid.class_token is not None):
            raise ConfigError(f"{self.cfg.variant.value} backbone got a grid "
                              f"{'with' if grid.class_token is not None else 'without'} class token")
        for i, blk in enumerate(self.blocks):
            if i and not divided:
                grid = self.merges[i - 1](grid)
            grid = blk(grid)
        if divided:
            return self.norm(grid.class_token)
        return self.norm(grid.tokens.mean(dim=(1, 2, 3)))

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        return self.forward_grid(self.tokenize(clips))


def forward(backbone: VideoTransformer, grid: TokenGrid) -> torch.Tensor:
    return backbone.forward_grid(grid)
