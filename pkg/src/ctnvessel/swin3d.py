"""Tiny 3D Swin Transformer branch.

Volumes are cut into non-overlapping patches, embedded as tokens, and
processed by four stages of window / shifted-window self-attention blocks
with 2x2x2 patch merging between stages. Stage outputs are returned as
``[B, C, d, h, w]`` grids.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

MASK_VALUE = -1.0e4


@dataclass
class SwinConfig:
    in_channels: int = 1
    patch_size: Tuple[int, int, int] = (4, 4, 4)
    stage_channels: Tuple[int, int, int, int] = (48, 96, 192, 384)
    stage_depths: Tuple[int, int, int, int] = (2, 2, 6, 2)
    num_heads: Tuple[int, int, int, int] = (3, 6, 12, 24)
    window_size: Tuple[int, int, int] = (4, 4, 4)
    mlp_ratio: float = 4.0
    qkv_bias: bool = True
    # add the pre-W-MSA input (z^{l-1}) as the shifted block's residual, as
    # literally written; the default adds the block's own input (z^l)
    literal_sw_residual: bool = False

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        self.window_size = tuple(int(w) for w in self.window_size)
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ValueError(f"patch_size must be 3 positive ints, got {self.patch_size}")
        if len(self.window_size) != 3 or min(self.window_size) < 1:
            raise ValueError(f"window_size must be 3 positive ints, got {self.window_size}")
        for name in ("stage_channels", "stage_depths", "num_heads"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} needs 4 entries, got {getattr(self, name)}")
        for a, b in zip(self.stage_channels, self.stage_channels[1:]):
            if b != 2 * a:
                raise ValueError(f"stage_channels must double per stage, got {self.stage_channels}")
        for c, h in zip(self.stage_channels, self.num_heads):
            if h < 1 or c % h:
                raise ValueError(f"{c} channels not divisible into {h} heads")
        if any(d < 2 or d % 2 for d in self.stage_depths):
            raise ValueError(f"stage_depths must be even and >= 2, got {self.stage_depths}")

    @property
    def shift_size(self) -> Tuple[int, int, int]:
        return tuple(w // 2 for w in self.window_size)

    @property
    def stride(self) -> int:
        """Input divisibility needed to reach the last stage."""
        return max(self.patch_size) * 8


# ---------------------------------------------------------------------------
# window geometry (tensors are channel-last here: [B, D, H, W, C])


def window_partition(x: torch.Tensor, window: Sequence[int]) -> torch.Tensor:
    """[B, D, H, W, C] -> [B*nW, wd*wh*ww, C]; dims must be multiples of ``window``."""
    B, D, H, W, C = x.shape
    wd, wh, ww = window
    x = x.view(B, D // wd, wd, H // wh, wh, W // ww, ww, C)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, wd * wh * ww, C)


def window_unpartition(windows: torch.Tensor, window: Sequence[int], B: int, D: int, H: int, W: int) -> torch.Tensor:
    wd, wh, ww = window
    x = windows.view(B, D // wd, H // wh, W // ww, wd, wh, ww, -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(B, D, H, W, -1)


def effective_shift(grid: Sequence[int], window: Sequence[int], shift: Sequence[int]):
    """Shifting is pointless on axes that one window already covers."""
    return tuple(0 if g <= w else s for g, w, s in zip(grid, window, shift))


def padded_dims(grid: Sequence[int], window: Sequence[int]) -> Tuple[int, int, int]:
    return tuple(math.ceil(g / w) * w for g, w in zip(grid, window))


def compute_attention_mask(grid: Sequence[int], window: Sequence[int], shift: Sequence[int],
                           device=None) -> Optional[torch.Tensor]:
    mask = _cached_mask(tuple(grid), tuple(window), tuple(shift))
    if mask is None or device is None:
        return mask
    return mask.to(device)


@lru_cache(maxsize=64)
def _cached_mask(grid, window, shift) -> Optional[torch.Tensor]:
    """Additive mask [nW, N, N] with 0 where query and key may attend, MASK_VALUE elsewhere.

    Keys are blocked when they are zero padding or, under a cyclic shift,
    when they came from a different region of the unshifted tiling.
    Returns ``None`` when nothing needs masking.
    """
    padded = padded_dims(grid, window)
    needs_pad = tuple(padded) != tuple(grid)
    if not any(shift) and not needs_pad:
        return None
    region = torch.zeros(padded, dtype=torch.long)
    cnt = 0
    spans = []
    for p, w, s in zip(padded, window, shift):
        spans.append(((0, p - w), (p - w, p - s), (p - s, p)) if s else ((0, p),))
    for ds in spans[0]:
        for hs in spans[1]:
            for ws in spans[2]:
                region[ds[0]:ds[1], hs[0]:hs[1], ws[0]:ws[1]] = cnt
                cnt += 1
    valid = torch.zeros(padded, dtype=torch.bool)
    valid[: grid[0], : grid[1], : grid[2]] = True
    # regions are laid out in shifted coordinates; padding is rolled like the tokens
    valid = torch.roll(valid, shifts=tuple(-s for s in shift), dims=(0, 1, 2))
    region = window_partition(region[None, ..., None], window).squeeze(-1)
    valid = window_partition(valid[None, ..., None], window).squeeze(-1)
    blocked = (region[:, :, None] != region[:, None, :]) | ~valid[:, None, :]
    mask = torch.zeros(blocked.shape, dtype=torch.float32)
    mask.masked_fill_(blocked, MASK_VALUE)
    return mask


def relative_position_index(window: Sequence[int], table_window: Sequence[int]) -> torch.Tensor:
    """[N, N] index into a bias table built for ``table_window``."""
    coords = torch.stack(torch.meshgrid(*(torch.arange(w) for w in window), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    td, th, tw = table_window
    rel = rel + torch.tensor([td - 1, th - 1, tw - 1])
    return rel[..., 0] * (2 * th - 1) * (2 * tw - 1) + rel[..., 1] * (2 * tw - 1) + rel[..., 2]


# ---------------------------------------------------------------------------
# modules


class WindowAttention3D(nn.Module):
    """Multi-head self-attention inside each window with a learned relative position bias."""

    def __init__(self, dim: int, window: Sequence[int], num_heads: int, qkv_bias: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.window = tuple(window)
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        wd, wh, ww = self.window
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * wd - 1) * (2 * wh - 1) * (2 * ww - 1), num_heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.register_buffer("relative_position_index", relative_position_index(self.window, self.window),
                             persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def attention_weights(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Softmax weights [B_, heads, N, N] and values [B_, heads, N, d]."""
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0] * self.scale, qkv[1], qkv[2]
        attn = q @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        attn = attn + bias.reshape(N, N, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(B_ // nW, nW, self.num_heads, N, N) + mask.to(attn.dtype)[None, :, None]
            attn = attn.view(B_, self.num_heads, N, N)
        return attn.softmax(dim=-1), v

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        B_, N, C = x.shape
        attn, v = self.attention_weights(x, mask)
        return self.proj((attn @ v).transpose(1, 2).reshape(B_, N, C))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock3D(nn.Module):
    """LN -> (shifted) window attention -> residual, then LN -> MLP -> residual.

    ``shifted=False`` is the plain window block; ``shifted=True`` rolls the
    token grid by half a window before attention and back afterwards.
    """

    def __init__(self, dim: int, num_heads: int, window: Sequence[int], shifted: bool,
                 mlp_ratio: float = 4.0, qkv_bias: bool = True):
        super().__init__()
        self.window = tuple(window)
        self.shift = tuple(w // 2 for w in window) if shifted else (0, 0, 0)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3D(dim, window, num_heads, qkv_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def attend(self, x: torch.Tensor, shift: Optional[Sequence[int]] = None) -> torch.Tensor:
        """Attention sub-layer on a channel-last grid [B, D, H, W, C], without residual."""
        B, D, H, W, C = x.shape
        shift = effective_shift((D, H, W), self.window, self.shift if shift is None else shift)
        Dp, Hp, Wp = padded_dims((D, H, W), self.window)
        x = F.pad(x, (0, 0, 0, Wp - W, 0, Hp - H, 0, Dp - D))
        if any(shift):
            x = torch.roll(x, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
        mask = compute_attention_mask((D, H, W), self.window, shift, device=x.device)
        out = self.attn(window_partition(x, self.window), mask)
        out = window_unpartition(out, self.window, B, Dp, Hp, Wp)
        if any(shift):
            out = torch.roll(out, shifts=tuple(shift), dims=(1, 2, 3))
        return out[:, :D, :H, :W].contiguous()

    def forward(self, x: torch.Tensor, residual: Optional[torch.Tensor] = None) -> torch.Tensor:
        x_hat = self.attend(self.norm1(x)) + (x if residual is None else residual)
        return self.mlp(self.norm2(x_hat)) + x_hat


class PatchEmbed3D(nn.Module):
    """Linear embedding of non-overlapping patches (a strided conv), then LayerNorm."""

    def __init__(self, patch_size: Sequence[int], in_channels: int, dim: int):
        super().__init__()
        self.patch_size = tuple(patch_size)
        self.proj = nn.Conv3d(in_channels, dim, kernel_size=self.patch_size, stride=self.patch_size)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if any(s % p for s, p in zip(x.shape[2:], self.patch_size)):
            raise ValueError(f"spatial dims {list(x.shape[2:])} not divisible by patch {list(self.patch_size)}")
        x = self.proj(x).permute(0, 2, 3, 4, 1)
        return self.norm(x)


class PatchMerging3D(nn.Module):
    """Concatenate each 2x2x2 token neighbourhood (8C) and project to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    @staticmethod
    def gather(x: torch.Tensor) -> torch.Tensor:
        """[B, D, H, W, C] -> [B, D/2, H/2, W/2, 8C]; channel block k holds offset (k>>2, k>>1 & 1, k & 1)."""
        B, D, H, W, C = x.shape
        if D % 2 or H % 2 or W % 2:
            raise ValueError(f"patch merging needs even token dims, got {[D, H, W]}")
        parts = [x[:, a::2, b::2, c::2] for a in (0, 1) for b in (0, 1) for c in (0, 1)]
        return torch.cat(parts, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.reduction(self.norm(self.gather(x)))


class SwinStage(nn.Module):
    def __init__(self, dim: int, depth: int, num_heads: int, window: Sequence[int],
                 mlp_ratio: float, qkv_bias: bool, literal_sw_residual: bool):
        super().__init__()
        self.literal_sw_residual = literal_sw_residual
        self.blocks = nn.ModuleList(
            SwinBlock3D(dim, num_heads, window, shifted=bool(i % 2), mlp_ratio=mlp_ratio, qkv_bias=qkv_bias)
            for i in range(depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, blk in enumerate(self.blocks):
            prev_input = x
            if i % 2 == 1 and self.literal_sw_residual:
                x = blk(x, residual=pair_input)
            else:
                x = blk(x)
            pair_input = prev_input
        return x


class SwinTransformer3D(nn.Module):
    def __init__(self, cfg: SwinConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or SwinConfig()
        self.patch_embed = PatchEmbed3D(cfg.patch_size, cfg.in_channels, cfg.stage_channels[0])
        self.stages = nn.ModuleList(
            SwinStage(c, d, h, cfg.window_size, cfg.mlp_ratio, cfg.qkv_bias, cfg.literal_sw_residual)
            for c, d, h in zip(cfg.stage_channels, cfg.stage_depths, cfg.num_heads))
        self.merges = nn.ModuleList(PatchMerging3D(c) for c in cfg.stage_channels[:3])
        self.apply(_init_weights)

    def stage_shapes(self, spatial: Sequence[int]) -> List[Tuple[int, int, int, int]]:
        tokens = [s // p for s, p in zip(spatial, self.cfg.patch_size)]
        return [(c, *(t // 2 ** j for t in tokens)) for j, c in enumerate(self.cfg.stage_channels)]

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        if x.ndim != 5 or any(s % self.cfg.stride for s in x.shape[2:]):
            raise ValueError(f"input {list(x.shape)} must be [B,C,D,H,W] with spatial dims divisible by {self.cfg.stride}")
        t = self.patch_embed(x)
        outs = []
        for j, stage in enumerate(self.stages):
            t = stage(t)
            outs.append(t.permute(0, 4, 1, 2, 3).contiguous())
            if j < 3:
                t = self.merges[j](t)
        return outs


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
