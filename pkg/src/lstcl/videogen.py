"""Synthetic labelled video corpora and long/short clip-pair sampling.

Each video shows one bright rectangle drifting on a torus. The video is cut
into ``segment_count`` equal segments; inside a segment the rectangle moves
with a constant (direction, speed) drawn from a small motion alphabet. A
class is an ordered tuple of motions, one per segment. Class patterns are
chosen so that every pair of adjacent segment motions is shared by at least
two classes, which makes any window shorter than one segment ambiguous while
the full sequence identifies the class.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, SamplingError

MAGIC = b"LSTCLVID"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIII")
_RECORD_HEAD = struct.Struct("<QI")

DIRECTIONS = ((0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0))


@dataclass(frozen=True)
class GeneratorConfig:
    k_classes: int = 10
    t_total: int = 64
    height: int = 16
    width: int = 16
    channels: int = 1
    segment_count: int = 4
    noise_std: float = 0.05
    speeds: tuple[float, ...] = (0.75, 1.5)
    motions_per_segment: int = 2
    rect_sizes: tuple[int, ...] = (3, 4, 5)
    brightness: tuple[float, float] = (0.8, 1.0)
    n_objects: int = 1
    speed_scale: tuple[float, float] = (1.0, 1.0)  # per-video speed factor, constant over the video
    pattern_seed: int = 0

    def __post_init__(self):
        # yaml/json round trips hand us lists
        for name in ("speeds", "rect_sizes", "brightness", "speed_scale"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.k_classes < 2:
            raise ConfigError(f"k_classes must be >= 2, got {self.k_classes}")
        if self.segment_count < 2:
            raise ConfigError(f"segment_count must be >= 2, got {self.segment_count}")
        for name in ("t_total", "height", "width", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.t_total < 2 * self.segment_count:
            raise ConfigError("t_total too small for segment_count")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if not self.speeds or any(s <= 0 for s in self.speeds):
            raise ConfigError("speeds must be a non-empty tuple of positive values")
        if not 2 <= self.motions_per_segment <= self.n_motions:
            raise ConfigError("motions_per_segment must lie in [2, number of motions]")
        if self.motions_per_segment**self.segment_count < self.k_classes:
            raise ConfigError("not enough distinct motion patterns for k_classes")
        if not self.rect_sizes or max(self.rect_sizes) >= min(self.height, self.width):
            raise ConfigError("rect_sizes must be smaller than the frame")
        lo, hi = self.brightness
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError("brightness range must satisfy 0 < lo <= hi <= 1")
        if self.n_objects < 1:
            raise ConfigError("n_objects must be >= 1")
        lo, hi = self.speed_scale
        if not 0.0 < lo <= hi:
            raise ConfigError("speed_scale range must satisfy 0 < lo <= hi")

    def object_offsets(self) -> np.ndarray:
        """Fixed (y, x) offsets of the rigid object group, shared by every video."""
        if self.n_objects == 1:
            return np.zeros((1, 2))
        rng = np.random.default_rng([self.pattern_seed, 1, self.n_objects])
        return rng.uniform(0, [self.height, self.width], size=(self.n_objects, 2))

    @property
    def n_motions(self) -> int:
        return len(DIRECTIONS) * len(self.speeds)

    def segment_bounds(self) -> list[int]:
        """Frame indices where segments start, plus ``t_total`` at the end."""
        return [round(j * self.t_total / self.segment_count) for j in range(self.segment_count + 1)]

    def motion_velocity(self, motion: int) -> tuple[float, float]:
        d = DIRECTIONS[motion % len(DIRECTIONS)]
        s = self.speeds[motion // len(DIRECTIONS)]
        return d[0] * s, d[1] * s

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Video:
    frames: np.ndarray  # (T_total, H, W, C) float32 in [0, 1]
    label: int
    seed: int
    motions: tuple[int, ...] = field(default=())

    @property
    def t_total(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class ClipSpec:
    start: int
    stride: int
    length: int

    def span(self) -> int:
        return (self.length - 1) * self.stride + 1

    @property
    def stop(self) -> int:
        """Last frame index covered (inclusive)."""
        return self.start + (self.length - 1) * self.stride

    def indices(self) -> np.ndarray:
        return self.start + self.stride * np.arange(self.length)

    def is_valid(self, t_total: int) -> bool:
        return self.start >= 0 and self.stride >= 1 and self.length >= 1 and self.stop < t_total


class Strategy(str, enum.Enum):
    INDEPENDENT = "independent"
    INCLUDED = "included"
    DISJOINT = "disjoint"


def _pairs_shared(patterns: Sequence[tuple[int, ...]]) -> bool:
    seen: dict[tuple[int, int, int], int] = {}
    for p in patterns:
        for j in range(len(p) - 1):
            key = (j, p[j], p[j + 1])
            seen[key] = seen.get(key, 0) + 1
    return all(n >= 2 for n in seen.values())


def ambiguity_possible(cfg: GeneratorConfig) -> bool:
    """Whether adjacent-pair sharing can hold: needs >= 3 segments and >= 4 classes."""
    return cfg.segment_count >= 3 and cfg.k_classes >= 4


def class_patterns(cfg: GeneratorConfig) -> list[tuple[int, ...]]:
    """Motion sequence of every class, found by seeded rejection search.

    Each segment position draws its motions from a random subset of the
    alphabet; a candidate set is accepted once every (position, adjacent
    motion pair) it uses is shared by at least two classes.
    """
    rng = np.random.default_rng([cfg.pattern_seed, cfg.k_classes, cfg.segment_count])
    if not ambiguity_possible(cfg):
        # too few classes/segments for shared pairs; fall back to distinct patterns
        grid = np.stack(np.meshgrid(*[np.arange(cfg.motions_per_segment)] * cfg.segment_count, indexing="ij"),
                        axis=-1).reshape(-1, cfg.segment_count)
        perm = rng.permutation(cfg.n_motions)
        pick = sorted(rng.choice(len(grid), size=cfg.k_classes, replace=False))
        return [tuple(int(perm[m]) for m in grid[i]) for i in pick]
    for _ in range(20000):
        subsets = [
            rng.choice(cfg.n_motions, size=cfg.motions_per_segment, replace=False)
            for _ in range(cfg.segment_count)
        ]
        grid = np.stack(np.meshgrid(*subsets, indexing="ij"), axis=-1).reshape(-1, cfg.segment_count)
        if len(grid) < cfg.k_classes:
            continue
        pick = rng.choice(len(grid), size=cfg.k_classes, replace=False)
        patterns = [tuple(int(m) for m in grid[i]) for i in sorted(pick)]
        if _pairs_shared(patterns):
            return patterns
    raise ConfigError("could not find ambiguous class patterns for this configuration")


def _coverage(pos: float, size: int, n: int) -> np.ndarray:
    """Fraction of each of ``n`` torus cells covered by ``[pos, pos + size)``."""
    cells = np.arange(n, dtype=np.float64)
    pos = pos % n
    cov = np.zeros(n)
    for k in (-1, 0, 1):
        lo = pos + k * n
        cov += np.clip(np.minimum(cells + 1, lo + size) - np.maximum(cells, lo), 0.0, 1.0)
    return cov


def render_video(cfg: GeneratorConfig, seed: int, patterns: Sequence[tuple[int, ...]] | None = None) -> Video:
    """Deterministically render one video from its 64-bit seed."""
    patterns = class_patterns(cfg) if patterns is None else patterns
    rng = np.random.default_rng(seed)
    label = int(rng.integers(cfg.k_classes))
    motions = patterns[label]
    rh, rw = (int(v) for v in rng.choice(cfg.rect_sizes, size=2))
    level = rng.uniform(*cfg.brightness)
    y, x = rng.uniform(0, cfg.height), rng.uniform(0, cfg.width)
    lo, hi = cfg.speed_scale
    scale = rng.uniform(lo, hi) if hi > lo else lo
    bounds = cfg.segment_bounds()
    offsets = cfg.object_offsets()

    frames = np.empty((cfg.t_total, cfg.height, cfg.width, cfg.channels), dtype=np.float64)
    seg = 0
    for t in range(cfg.t_total):
        while t >= bounds[seg + 1]:
            seg += 1
        img = level * np.max([np.outer(_coverage(y + oy, rh, cfg.height), _coverage(x + ox, rw, cfg.width))
                              for oy, ox in offsets], axis=0)
        frames[t] = img[:, :, None]
        vy, vx = cfg.motion_velocity(motions[seg])
        y, x = y + scale * vy, x + scale * vx
    if cfg.noise_std > 0:
        frames += rng.normal(0.0, cfg.noise_std, size=frames.shape)
    np.clip(frames, 0.0, 1.0, out=frames)
    return Video(frames=frames.astype(np.float32), label=label, seed=int(seed), motions=tuple(motions))


def video_seeds(seed: int, n_videos: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(n_videos, dtype=np.uint64)


def generate_corpus(cfg: GeneratorConfig, n_videos: int, seed: int, workers: int = 1) -> list[Video]:
    """Generate ``n_videos`` videos; output is independent of ``workers``."""
    if n_videos < 1:
        raise ConfigError("n_videos must be >= 1")
    cfg.validate()
    patterns = class_patterns(cfg)
    seeds = [int(s) for s in video_seeds(seed, n_videos)]
    if workers <= 1:
        return [render_video(cfg, s, patterns) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: render_video(cfg, s, patterns), seeds))


# --------------------------------------------------------------------------
# clip sampling

def _uniform_start(rng: np.random.Generator, t_total: int, span: int) -> int:
    return int(rng.integers(0, t_total - span + 1))


def sample_pair(
    t_total: int,
    length: int,
    stride_short: int,
    stride_long: int,
    strategy: Strategy | str,
    rng: np.random.Generator,
    max_attempts: int = 1000,
) -> tuple[ClipSpec, ClipSpec]:
    """Sample a (short, long) clip pair from a video of ``t_total`` frames.

    ``t_total`` may also be a :class:`Video`, in which case its length is used.
    """
    if isinstance(t_total, Video):
        t_total = t_total.t_total
    strategy = Strategy(strategy)
    if stride_short < 1 or stride_long < stride_short:
        raise ConfigError(f"need 1 <= stride_short <= stride_long, got {stride_short}, {stride_long}")
    short = ClipSpec(0, stride_short, length)
    long = ClipSpec(0, stride_long, length)
    s_span, l_span = short.span(), long.span()
    if l_span > t_total:
        raise SamplingError(f"{strategy.value}: long span {l_span} exceeds video length {t_total}")

    if strategy is Strategy.INDEPENDENT:
        ls = _uniform_start(rng, t_total, l_span)
        ss = _uniform_start(rng, t_total, s_span)
    elif strategy is Strategy.INCLUDED:
        ls = _uniform_start(rng, t_total, l_span)
        ss = ls + int(rng.integers(0, l_span - s_span + 1))
    else:
        if s_span + l_span > t_total:
            raise SamplingError(
                f"{strategy.value}: spans {s_span} + {l_span} cannot fit disjointly in {t_total} frames"
            )
        for _ in range(max_attempts):
            ls = _uniform_start(rng, t_total, l_span)
            ss = _uniform_start(rng, t_total, s_span)
            if ss + s_span <= ls or ls + l_span <= ss:
                break
        else:
            raise SamplingError(f"{strategy.value}: no disjoint pair after {max_attempts} attempts")
    return ClipSpec(ss, stride_short, length), ClipSpec(ls, stride_long, length)


def extract_clip(video: Video | np.ndarray, spec: ClipSpec) -> np.ndarray:
    frames = video.frames if isinstance(video, Video) else video
    if not spec.is_valid(frames.shape[0]):
        raise IndexError(f"{spec} out of range for {frames.shape[0]} frames")
    return frames[spec.indices()].copy()


# --------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    """Temporally coherent augmentation: one draw per clip, applied to all frames."""

    translate: bool = True  # cyclic shift; the scene is a torus, so motion is unchanged
    crop: bool = True
    crop_scale: tuple[float, float] = (0.6, 1.0)
    flip_prob: float = 0.0  # a flip reverses horizontal motion, i.e. changes the label
    brightness: float = 0.2

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(translate=False, crop=False, flip_prob=0.0, brightness=0.0)


def augment(clip: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    out = clip
    _, h, w, _ = clip.shape
    if cfg.translate:
        out = np.roll(out, (int(rng.integers(h)), int(rng.integers(w))), axis=(1, 2))
    if cfg.crop:
        scale = rng.uniform(*cfg.crop_scale)
        ch = max(1, min(h, round(h * np.sqrt(scale))))
        cw = max(1, min(w, round(w * np.sqrt(scale))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        crop = torch.from_numpy(np.ascontiguousarray(out[:, top:top + ch, left:left + cw, :]))
        crop = crop.permute(0, 3, 1, 2)
        out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
        out = out.permute(0, 2, 3, 1).numpy()
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1, :]
    if cfg.brightness > 0:
        # multiplicative, so the dark background stays dark
        out = out * (1.0 + rng.uniform(-cfg.brightness, cfg.brightness))
    return np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)


# --------------------------------------------------------------------------
# corpus files

def write_corpus(path: str | Path, videos: Sequence[Video], cfg: GeneratorConfig) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(videos), cfg.t_total, cfg.height,
                              cfg.width, cfg.channels, cfg.k_classes))
        for v in videos:
            fh.write(_RECORD_HEAD.pack(v.seed, v.label))
            fh.write(np.ascontiguousarray(v.frames, dtype="<f4").tobytes())


def read_corpus(path: str | Path) -> list[Video]:
    data = Path(path).read_bytes()
    magic, version, n, t, h, w, c, k = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a corpus file")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported corpus version {version}")
    off = _HEADER.size
    frame_bytes = t * h * w * c * 4
    videos = []
    for _ in range(n):
        seed, label = _RECORD_HEAD.unpack_from(data, off)
        off += _RECORD_HEAD.size
        frames = np.frombuffer(data, dtype="<f4", count=t * h * w * c, offset=off).reshape(t, h, w, c)
        off += frame_bytes
        videos.append(Video(frames=frames.astype(np.float32), label=int(label), seed=int(seed)))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after {n} videos")
    return videos


def write_manifest(path: str | Path, cfg: GeneratorConfig, seed: int, splits: dict[str, int],
                   extra: dict | None = None) -> None:
    manifest = {**(extra or {}),
        "format": "LSTCLVID",
        "version": FORMAT_VERSION,
        "generator": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "splits": splits,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> tuple[GeneratorConfig, dict]:
    manifest = json.loads(Path(path).read_text())
    return GeneratorConfig(**manifest["generator"]), manifest


# --------------------------------------------------------------------------
# ambiguity oracle

def _circular_centroid(frames: np.ndarray) -> np.ndarray:
    """Per-frame (y, x) intensity centroid on the torus, shape (T, 2)."""
    img = frames.sum(axis=-1)
    t, h, w = img.shape
    out = np.empty((t, 2))
    for axis, n in ((1, h), (2, w)):
        prof = img.sum(axis=3 - axis)
        ang = 2 * np.pi * np.arange(n) / n
        out[:, axis - 1] = np.arctan2(prof @ np.sin(ang), prof @ np.cos(ang)) * n / (2 * np.pi)
    return out


def frame_velocities(frames: np.ndarray) -> np.ndarray:
    """Frame-to-frame centroid displacement, wrapped to the torus, shape (T-1, 2)."""
    h, w = frames.shape[1:3]
    c = _circular_centroid(frames)
    d = np.diff(c, axis=0)
    period = np.array([h, w], dtype=np.float64)
    return (d + period / 2) % period - period / 2


def ambiguity_check(
    cfg: GeneratorConfig,
    n_videos: int = 500,
    seed: int = 0,
    window: int = 8,
    videos: Sequence[Video] | None = None,
) -> dict:
    """Fit logistic oracles on handcrafted motion features.

    Returns held-out accuracies of a classifier that sees one ``window``-frame
    stride-1 window per video and of one that sees per-segment mean velocities
    of the whole video. The corpus is ambiguous when the first is below 1 and
    the second equals 1.
    """
    from sklearn.linear_model import LogisticRegression

    videos = generate_corpus(cfg, n_videos, seed) if videos is None else videos
    rng = np.random.default_rng(seed)
    bounds = cfg.segment_bounds()
    win_x, full_x, y = [], [], []
    for v in videos:
        vel = frame_velocities(v.frames)
        start = int(rng.integers(0, v.t_total - window + 1))
        win_x.append(vel[start:start + window - 1].ravel())
        full_x.append(np.concatenate([vel[a:b - 1].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])]))
        y.append(v.label)
    y = np.asarray(y)
    n_train = int(0.7 * len(y))

    def fit(x):
        x = np.asarray(x)
        clf = LogisticRegression(C=10.0, max_iter=5000)
        clf.fit(x[:n_train], y[:n_train])
        return float(clf.score(x[n_train:], y[n_train:]))

    return {"window_accuracy": fit(win_x), "video_accuracy": fit(full_x), "window": window}
