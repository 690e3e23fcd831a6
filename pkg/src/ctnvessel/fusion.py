"""Cross-branch fusion and the assembled CTN (U-Net plus Swin branch).

Swin stage ``j`` is resized to U-Net stage ``i``'s grid and projected to its
width by a bias-free 1x1x1 convolution, then either added to the U-Net
stage output or concatenated with it and mixed by a 3x3x3 convolution.
The fused map replaces the encoder stage output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .swin3d import SwinConfig, SwinTransformer3D
from .unet3d import UnetConfig, UNet3D

FUSION_MODES = ("add", "concat")
# stage subsets of the fusion-stage ablation, in table order
ABLATION_STAGE_GRID = ((), (1, 2, 3), (1, 2, 4), (1, 3, 4), (2, 3, 4), (1, 2, 3, 4))


@dataclass
class FusionConfig:
    mode: str = "add"
    enabled_stages: Tuple[int, ...] = (1, 2, 3, 4)
    pairing: Tuple[Tuple[int, int], ...] = ((1, 1), (2, 2), (3, 3), (4, 4))

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")
        self.enabled_stages = tuple(sorted(int(s) for s in self.enabled_stages))
        self.pairing = tuple((int(i), int(j)) for i, j in self.pairing)
        unet_stages = [i for i, _ in self.pairing]
        if len(set(unet_stages)) != len(unet_stages):
            raise ValueError(f"pairing must use each U-Net stage at most once, got {self.pairing}")
        for i, j in self.pairing:
            if not (1 <= i <= 4 and 1 <= j <= 4):
                raise ValueError(f"pairing stages must lie in 1..4, got {(i, j)}")
        missing = set(self.enabled_stages) - set(unet_stages)
        if missing:
            raise ValueError(f"enabled stages {sorted(missing)} have no pairing")
        if len(set(self.enabled_stages)) != len(self.enabled_stages):
            raise ValueError(f"duplicate enabled stages {self.enabled_stages}")

    def swin_stage_for(self, i: int) -> int:
        return dict(self.pairing)[i]


@dataclass
class CtnConfig:
    unet: UnetConfig = field(default_factory=UnetConfig)
    swin: SwinConfig = field(default_factory=SwinConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    input_size: Tuple[int, int, int] = (64, 64, 64)

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.swin.in_channels != self.unet.in_channels:
            raise ValueError("both branches must read the same input channels")
        if any(s % self.stride for s in self.input_size):
            raise ValueError(f"input_size {self.input_size} must be divisible by {self.stride}")

    @property
    def stride(self) -> int:
        return max(self.unet.stride, self.swin.stride)


def reshape_to(f_s: torch.Tensor, target_shape: Sequence[int], proj: nn.Conv3d) -> torch.Tensor:
    """Trilinear resize of ``f_s`` to ``target_shape[1:]`` then a 1x1x1 channel map."""
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != 4 or min(target_shape) < 1:
        raise ValueError(f"target shape must be 4 positive ints (C, D, H, W), got {target_shape}")
    if proj.out_channels != target_shape[0]:
        raise ValueError(f"projection emits {proj.out_channels} channels, target needs {target_shape[0]}")
    if tuple(f_s.shape[2:]) != target_shape[1:]:
        f_s = F.interpolate(f_s, size=target_shape[1:], mode="trilinear", align_corners=False)
    return proj(f_s)


def fuse_add(f_u: torch.Tensor, f_s_reshaped: torch.Tensor) -> torch.Tensor:
    if f_u.shape != f_s_reshaped.shape:
        raise ValueError(f"shape mismatch: {list(f_u.shape)} vs {list(f_s_reshaped.shape)}")
    return f_u + f_s_reshaped


def fuse_concat(f_u: torch.Tensor, f_s_reshaped: torch.Tensor, conv: nn.Conv3d) -> torch.Tensor:
    if f_u.shape[0] != f_s_reshaped.shape[0] or f_u.shape[2:] != f_s_reshaped.shape[2:]:
        raise ValueError(f"spatial mismatch: {list(f_u.shape)} vs {list(f_s_reshaped.shape)}")
    return conv(torch.cat([f_u, f_s_reshaped], dim=1))


class StageFusion(nn.Module):
    def __init__(self, mode: str, swin_ch: int, unet_ch: int):
        super().__init__()
        self.mode = mode
        self.proj = nn.Conv3d(swin_ch, unet_ch, 1, bias=False)
        self.mix = nn.Conv3d(2 * unet_ch, unet_ch, 3, padding=1) if mode == "concat" else None

    def reshape(self, f_s: torch.Tensor, like: Sequence[int]) -> torch.Tensor:
        return reshape_to(f_s, like, self.proj)

    def forward(self, f_u: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
        r = self.reshape(f_s, f_u.shape[1:])
        return fuse_add(f_u, r) if self.mode == "add" else fuse_concat(f_u, r, self.mix)


class CTN(nn.Module):
    """U-Net backbone and Swin branch fed the same volume, fused at the enabled encoder stages."""

    def __init__(self, cfg: CtnConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or CtnConfig()
        self.unet = UNet3D(cfg.unet)
        self.swin = SwinTransformer3D(cfg.swin)
        self.fusion = nn.ModuleDict()
        for i in cfg.fusion.enabled_stages:
            j = cfg.fusion.swin_stage_for(i)
            self.fusion[str(i)] = StageFusion(cfg.fusion.mode, cfg.swin.stage_channels[j - 1],
                                              cfg.unet.stage_channels[i - 1])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[2:]) != self.cfg.input_size:
            raise ValueError(f"input spatial size {list(x.shape[2:])} != configured {list(self.cfg.input_size)}")
        enabled = self.cfg.fusion.enabled_stages
        if not enabled:
            return self.unet(x)
        f_s = self.swin(x)
        unet_shapes = self.unet.stage_shapes(x.shape[2:])
        if self.cfg.fusion.mode == "add":
            taps = {}
            for i in enabled:
                fs = f_s[self.cfg.fusion.swin_stage_for(i) - 1]
                taps[i] = self.fusion[str(i)].reshape(fs, unet_shapes[i - 1])
            return self.unet.decode(self.unet.encode(x, taps=taps))
        hooks = {}
        for i in enabled:
            fs = f_s[self.cfg.fusion.swin_stage_for(i) - 1]
            hooks[i] = lambda f_u, fs=fs, mod=self.fusion[str(i)]: mod(f_u, fs)
        return self.unet.decode(self.unet.encode(x, hooks=hooks))


def build_model(cfg: CtnConfig) -> nn.Module:
    return CTN(cfg)


def ablation_configs(base: CtnConfig) -> List[Tuple[str, CtnConfig]]:
    """Fusion-stage grid (six rows) with ``base``'s mode."""
    from dataclasses import replace

    rows = []
    for stages in ABLATION_STAGE_GRID:
        name = "stages_" + ("".join(str(s) for s in stages) or "none")
        rows.append((name, replace(base, fusion=replace(base.fusion, enabled_stages=stages))))
    return rows


def fusion_mode_configs(base: CtnConfig) -> List[Tuple[str, CtnConfig]]:
    """The two fusion operators with ``base``'s stage set."""
    from dataclasses import replace

    return [(f"mode_{m}", replace(base, fusion=replace(base.fusion, mode=m))) for m in ("concat", "add")]
