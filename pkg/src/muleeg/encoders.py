"""Time-series encoder (1-D bottleneck ResNet), spectrogram encoder (2-D CNN)
and projection heads.

Two size presets exist. ``paper`` follows the ResNet-50 stage layout
(3, 4, 6, 3 bottleneck blocks) with channels scaled down to roughly 0.6M
parameters; ``desk`` is a two-stage network small enough for CPU tests.
Both emit 256-d features.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn

from .seeding import seed_torch
from .transforms import InvalidInputError


class EncoderKind(str, Enum):
    TIME = "time"
    SPECTROGRAM = "spectrogram"


class Preset(str, Enum):
    PAPER = "paper"
    DESK = "desk"


@dataclass
class EncoderConfig:
    kind: EncoderKind = EncoderKind.TIME
    preset: Preset = Preset.DESK
    width_multiplier: float = 1.0
    first_kernel: int = 71
    body_kernel: int = 25
    feature_dim: int = 256

    def __post_init__(self):
        self.kind = EncoderKind(self.kind)
        self.preset = Preset(self.preset)
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.first_kernel % 2 == 0 or self.body_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")


@dataclass
class ProjectionHeadConfig:
    in_dim: int = 256
    hidden_dim: int | None = None
    out_dim: int = 128


# (mid channels, out channels, blocks, stride) per stage, before width scaling
_TIME_STAGES = {
    Preset.PAPER: [(8, 32, 3, 1), (16, 64, 4, 2), (32, 128, 6, 2), (64, 256, 3, 2)],
    Preset.DESK: [(8, 32, 1, 2), (16, 64, 1, 2)],
}
_TIME_STEM = {Preset.PAPER: 8, Preset.DESK: 8}
_TIME_STEM_STRIDE = {Preset.PAPER: 2, Preset.DESK: 4}
_SPEC_CHANNELS = {
    Preset.PAPER: (32, 64, 128, 256),
    Preset.DESK: (8, 16, 32, 64),
}
_SPEC_FIRST_STRIDE = {Preset.PAPER: 1, Preset.DESK: 2}


def _scaled(c: int, mult: float) -> int:
    return max(1, int(round(c * mult)))


class Bottleneck1d(nn.Module):
    def __init__(self, in_ch: int, mid: int, out: int, stride: int, kernel: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv1d(in_ch, mid, 1, bias=False),
            nn.BatchNorm1d(mid),
            nn.ReLU(inplace=True),
            nn.Conv1d(mid, mid, kernel, stride=stride, padding=kernel // 2, bias=False),
            nn.BatchNorm1d(mid),
            nn.ReLU(inplace=True),
            nn.Conv1d(mid, out, 1, bias=False),
            nn.BatchNorm1d(out),
        )
        if stride != 1 or in_ch != out:
            self.shortcut = nn.Sequential(
                nn.Conv1d(in_ch, out, 1, stride=stride, bias=False),
                nn.BatchNorm1d(out),
            )
        else:
            self.shortcut = nn.Identity()
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.body(x) + self.shortcut(x))


class TimeEncoder(nn.Module):
    """``[N, L]`` raw epochs -> ``[N, feature_dim]`` via residual 1-D stages and global average pooling."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        m = cfg.width_multiplier
        stem = _scaled(_TIME_STEM[cfg.preset], m)
        self.stem = nn.Sequential(
            nn.Conv1d(1, stem, cfg.first_kernel, stride=_TIME_STEM_STRIDE[cfg.preset],
                      padding=cfg.first_kernel // 2, bias=False),
            nn.BatchNorm1d(stem),
            nn.ReLU(inplace=True),
            nn.MaxPool1d(3, stride=2, padding=1),
        )
        blocks = []
        ch = stem
        for mid, out, n_blocks, stride in _TIME_STAGES[cfg.preset]:
            mid, out = _scaled(mid, m), _scaled(out, m)
            for b in range(n_blocks):
                blocks.append(Bottleneck1d(ch, mid, out, stride if b == 0 else 1, cfg.body_kernel))
                ch = out
        self.stages = nn.Sequential(*blocks)
        if ch != cfg.feature_dim:
            self.expand = nn.Sequential(
                nn.Conv1d(ch, cfg.feature_dim, 1, bias=False),
                nn.BatchNorm1d(cfg.feature_dim),
                nn.ReLU(inplace=True),
            )
        else:
            self.expand = nn.Identity()
        self.pool = nn.AdaptiveAvgPool1d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 2:
            x = x.unsqueeze(1)
        if x.shape[-1] < self.cfg.first_kernel:
            raise InvalidInputError(
                f"input length {x.shape[-1]} shorter than first kernel {self.cfg.first_kernel}"
            )
        h = self.expand(self.stages(self.stem(x)))
        return self.pool(h).flatten(1)


class SpectrogramEncoder(nn.Module):
    """``[N, frames, bins]`` log-spectrograms -> ``[N, feature_dim]``.

    Four conv-BN-ReLU-maxpool blocks followed by global average pooling.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        ch = 1
        for i, c in enumerate(_SPEC_CHANNELS[cfg.preset]):
            c = _scaled(c, cfg.width_multiplier)
            stride = _SPEC_FIRST_STRIDE[cfg.preset] if i == 0 else 1
            layers += [
                nn.Conv2d(ch, c, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2, ceil_mode=True),
            ]
            ch = c
        if ch != cfg.feature_dim:
            layers += [nn.Conv2d(ch, cfg.feature_dim, 1, bias=False), nn.BatchNorm2d(cfg.feature_dim),
                       nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x.unsqueeze(1)
        return self.pool(self.body(x)).flatten(1)


class ProjectionHead(nn.Module):
    """Linear > BatchNorm > ReLU > Linear."""

    def __init__(self, cfg: ProjectionHeadConfig):
        super().__init__()
        hidden = cfg.hidden_dim or cfg.in_dim
        self.net = nn.Sequential(
            nn.Linear(cfg.in_dim, hidden),
            nn.BatchNorm1d(hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, cfg.out_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] < 2:
            raise ValueError("projection head needs a batch of at least 2 in training mode "
                             "(batch-norm statistics are undefined for one sample)")
        return self.net(x)


def build_time_encoder(cfg: EncoderConfig, seed: int | None = None) -> TimeEncoder:
    if cfg.kind is not EncoderKind.TIME:
        raise ValueError(f"expected a TIME encoder config, got {cfg.kind.value}")
    if seed is not None:
        seed_torch(seed, "init", "time_encoder")
    return TimeEncoder(cfg)


def build_spectrogram_encoder(cfg: EncoderConfig, seed: int | None = None) -> SpectrogramEncoder:
    if cfg.kind is not EncoderKind.SPECTROGRAM:
        raise ValueError(f"expected a SPECTROGRAM encoder config, got {cfg.kind.value}")
    if seed is not None:
        seed_torch(seed, "init", "spectrogram_encoder")
    return SpectrogramEncoder(cfg)


def build_projection_head(cfg: ProjectionHeadConfig, seed: int | None = None, name: str = "head") -> ProjectionHead:
    if seed is not None:
        seed_torch(seed, "init", name)
    return ProjectionHead(cfg)


def concat_features(t: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Time features first, spectrogram features second."""
    if t.shape[0] != s.shape[0]:
        raise ValueError(f"batch sizes differ: {t.shape[0]} vs {s.shape[0]}")
    return torch.cat([t, s], dim=1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
