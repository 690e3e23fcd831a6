"""3D U-Net backbone with per-stage injection points for fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class UnetConfig:
    in_channels: int = 1
    num_classes: int = 3
    stage_channels: Tuple[int, int, int, int] = (32, 64, 128, 256)
    norm_kind: str = "instance"
    nonlinearity: str = "leaky_relu"

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 4:
            raise ValueError(f"stage_channels needs 4 entries, got {self.stage_channels}")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage_channels must be strictly increasing, got {self.stage_channels}")
        if self.norm_kind not in ("instance", "batch"):
            raise ValueError(f"norm_kind must be 'instance' or 'batch', got {self.norm_kind!r}")
        if self.nonlinearity not in ("relu", "leaky_relu"):
            raise ValueError(f"nonlinearity must be 'relu' or 'leaky_relu', got {self.nonlinearity!r}")

    @property
    def stride(self) -> int:
        return 16


class InstanceNorm3d(nn.InstanceNorm3d):
    """Affine instance norm that also accepts a single voxel per channel.

    torch refuses 1-voxel inputs as a guard; normalising one value is still
    well defined (it maps to the bias), and a 16^3 input reaches 1^3 at /16.
    """

    def __init__(self, num_features: int):
        super().__init__(num_features, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.instance_norm(x, self.weight, self.bias, None, None, True, self.momentum, self.eps, False)


def conv_block(cfg: UnetConfig, in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    norm = InstanceNorm3d(out_ch) if cfg.norm_kind == "instance" else nn.BatchNorm3d(out_ch)
    act = nn.LeakyReLU(0.01, inplace=True) if cfg.nonlinearity == "leaky_relu" else nn.ReLU(inplace=True)
    return nn.Sequential(nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1), norm, act)


def double_block(cfg: UnetConfig, in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(conv_block(cfg, in_ch, out_ch, stride), conv_block(cfg, out_ch, out_ch))


class UpBlock(nn.Module):
    """Trilinear 2x upsampling, conv to the skip width, concat skip, two conv blocks."""

    def __init__(self, cfg: UnetConfig, in_ch: int, skip_ch: int):
        super().__init__()
        self.reduce = conv_block(cfg, in_ch, skip_ch)
        self.fuse = double_block(cfg, 2 * skip_ch, skip_ch)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[2:], mode="trilinear", align_corners=False)
        return self.fuse(torch.cat([self.reduce(x), skip], dim=1))


@dataclass
class Encoded:
    stem: torch.Tensor
    stages: List[torch.Tensor]
    bottleneck: torch.Tensor


class UNet3D(nn.Module):
    """Full-resolution stem, four stride-2 stages (/2 .. /16), a bottleneck
    block at /16, and a decoder with concatenating skip connections."""

    def __init__(self, cfg: UnetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or UnetConfig()
        c = cfg.stage_channels
        self.stem = double_block(cfg, cfg.in_channels, c[0])
        widths = (c[0],) + c
        self.down = nn.ModuleList(double_block(cfg, widths[i], widths[i + 1], stride=2) for i in range(4))
        self.bottleneck = double_block(cfg, c[3], c[3])
        # decoder levels: /8, /4, /2, full resolution
        self.up = nn.ModuleList(UpBlock(cfg, widths[i + 1], widths[i]) for i in reversed(range(4)))
        self.head = nn.Conv3d(c[0], cfg.num_classes, 1)

    def stage_shapes(self, spatial: Sequence[int]) -> List[Tuple[int, int, int, int]]:
        """(C, D, H, W) of the four stage outputs for an input of ``spatial`` size."""
        return [(ch, *(s // 2 ** (i + 1) for s in spatial)) for i, ch in enumerate(self.cfg.stage_channels)]

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected [B,{self.cfg.in_channels},D,H,W], got {list(x.shape)}")
        if any(s % 16 for s in x.shape[2:]):
            raise ValueError(f"spatial dims {list(x.shape[2:])} must be divisible by 16")

    def encode(
        self,
        x: torch.Tensor,
        taps: Optional[Dict[int, torch.Tensor]] = None,
        hooks: Optional[Dict[int, Callable[[torch.Tensor], torch.Tensor]]] = None,
    ) -> Encoded:
        """Run the encoder.

        ``taps[i]`` is added to stage ``i`` (1-based) and ``hooks[i]`` maps
        the stage output to its replacement; either way the result feeds
        both the skip connection and the next stage.
        """
        self.check_input(x)
        taps = taps or {}
        hooks = hooks or {}
        h = self.stem(x)
        stem = h
        stages = []
        for i, block in enumerate(self.down, start=1):
            h = block(h)
            if i in taps:
                if taps[i].shape != h.shape:
                    raise ValueError(f"tap {i} shape {list(taps[i].shape)} != stage shape {list(h.shape)}")
                h = h + taps[i]
            if i in hooks:
                h = hooks[i](h)
            stages.append(h)
        return Encoded(stem, stages, self.bottleneck(h))

    def decode(self, enc: Encoded) -> torch.Tensor:
        skips = [enc.stem] + enc.stages[:3]
        h = enc.bottleneck
        for block, skip in zip(self.up, reversed(skips)):
            if skip.shape[2:] != tuple(2 * s for s in h.shape[2:]):
                raise ValueError(f"skip {list(skip.shape)} inconsistent with decoder feature {list(h.shape)}")
            h = block(h, skip)
        return self.head(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))
