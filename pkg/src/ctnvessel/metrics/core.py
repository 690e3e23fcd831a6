"""Overlap, surface-distance and skeleton metrics for label volumes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Tuple

import numpy as np
from scipy import ndimage

from ..volio import AORTA, CORONARY, LabelMask
from .skeleton import skeletonize

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


class AssdUndefinedError(ValueError):
    """Surface distance requested with an empty surface on one side."""


@dataclass
class BinaryMask:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 3:
            raise ValueError(f"binary mask must be rank 3, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")


def _as_mask(m) -> BinaryMask:
    return m if isinstance(m, BinaryMask) else BinaryMask(m)


def _check_pair(s: BinaryMask, g: BinaryMask, spacing: bool = False) -> None:
    if s.data.shape != g.data.shape:
        raise ValueError(f"shape mismatch: {s.data.shape} vs {g.data.shape}")
    if spacing and not np.allclose(s.spacing, g.spacing):
        raise ValueError(f"spacing mismatch: {s.spacing} vs {g.spacing}")


def dice_with_flag(s, g) -> Tuple[float, bool]:
    """Dice overlap and whether both masks were empty (then 1.0 by convention)."""
    s, g = _as_mask(s), _as_mask(g)
    _check_pair(s, g)
    total = int(s.data.sum()) + int(g.data.sum())
    if total == 0:
        return 1.0, True
    return 2.0 * int(np.logical_and(s.data, g.data).sum()) / total, False


def dice(s, g) -> float:
    return dice_with_flag(s, g)[0]


def surface_mask(m) -> np.ndarray:
    """Foreground voxels with at least one background face neighbour (outside counts as background)."""
    data = _as_mask(m).data
    interior = ndimage.binary_erosion(data, structure=_FACE_NEIGHBOURS, border_value=0)
    return data & ~interior


def extract_surface(m) -> np.ndarray:
    """Surface voxel coordinates as an (N, 3) integer array in C order."""
    return np.argwhere(surface_mask(m))


def _surface_distances(src_surface: np.ndarray, dst_surface: np.ndarray, spacing) -> np.ndarray:
    """Distance (mm) from each ``src_surface`` voxel to the nearest ``dst_surface`` voxel."""
    dist = ndimage.distance_transform_edt(~dst_surface, sampling=spacing)
    return dist[src_surface]


def assd(s, g) -> float:
    """Average symmetric surface distance in millimetres.

    Each surface voxel of either mask contributes its distance to the
    other mask's surface; the sum is divided by the total number of surface
    voxels.
    """
    s, g = _as_mask(s), _as_mask(g)
    _check_pair(s, g, spacing=True)
    ts, tg = surface_mask(s), surface_mask(g)
    if not ts.any() or not tg.any():
        raise AssdUndefinedError("average surface distance is undefined for an empty surface")
    d_gs = _surface_distances(tg, ts, g.spacing)
    d_sg = _surface_distances(ts, tg, s.spacing)
    return float((d_gs.sum() + d_sg.sum()) / (d_gs.size + d_sg.size))


@dataclass
class SkeletonScores:
    sr: float
    sp: float
    sr_degenerate: bool = False
    sp_degenerate: bool = False


def skeleton_metrics(s, g, backend: str | None = None) -> SkeletonScores:
    """Skeleton recall |S ∩ Q(G)|/|Q(G)| and precision |G ∩ Q(S)|/|Q(S)|.

    An empty skeleton makes the matching rate 0 and sets its degenerate flag.
    """
    s, g = _as_mask(s), _as_mask(g)
    _check_pair(s, g)
    qg = skeletonize(g.data, backend)
    qs = skeletonize(s.data, backend)
    n_qg, n_qs = int(qg.sum()), int(qs.sum())
    sr = int((s.data & qg).sum()) / n_qg if n_qg else 0.0
    sp = int((g.data & qs).sum()) / n_qs if n_qs else 0.0
    return SkeletonScores(sr, sp, n_qg == 0, n_qs == 0)


@dataclass
class MetricsReport:
    dice: float
    dice_a: float
    dice_c: float
    assd_mm: float
    sp: float
    sr: float
    flags: list = field(default_factory=list)

    COLUMNS = ("dice", "dice_a", "dice_c", "assd_mm", "sp", "sr")

    def as_dict(self) -> dict:
        return asdict(self)

    def values(self) -> Tuple[float, ...]:
        return tuple(getattr(self, c) for c in self.COLUMNS)


def evaluate(pred: LabelMask, gt: LabelMask, skeleton_labels: str = "foreground",
             backend: str | None = None) -> MetricsReport:
    """All six table metrics for one prediction / ground-truth pair.

    DICE uses the aorta ∪ coronary foreground; DICE_A and DICE_C the single
    classes. ASSD and the skeleton rates use the foreground union, or only
    the coronary class when ``skeleton_labels="coronary"``.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not np.allclose(pred.spacing, gt.spacing):
        raise ValueError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    if skeleton_labels not in ("foreground", "coronary"):
        raise ValueError(f"skeleton_labels must be 'foreground' or 'coronary', got {skeleton_labels!r}")
    spacing = gt.spacing
    p, g = pred.data, gt.data
    flags = []

    fg_p, fg_g = BinaryMask(p > 0, spacing), BinaryMask(g > 0, spacing)
    d, empty = dice_with_flag(fg_p, fg_g)
    if empty:
        flags.append("dice_empty")
    if not fg_p.data.any():
        flags.append("pred_empty")
    d_a, empty = dice_with_flag(p == AORTA, g == AORTA)
    if empty:
        flags.append("dice_a_empty")
    d_c, empty = dice_with_flag(p == CORONARY, g == CORONARY)
    if empty:
        flags.append("dice_c_empty")

    if skeleton_labels == "coronary":
        ts_p, ts_g = BinaryMask(p == CORONARY, spacing), BinaryMask(g == CORONARY, spacing)
    else:
        ts_p, ts_g = fg_p, fg_g
    try:
        dist = assd(ts_p, ts_g)
    except AssdUndefinedError:
        dist = math.nan
        flags.append("assd_undefined")
    sk = skeleton_metrics(ts_p, ts_g, backend)
    if sk.sr_degenerate:
        flags.append("sr_degenerate")
    if sk.sp_degenerate:
        flags.append("sp_degenerate")
    return MetricsReport(d, d_a, d_c, dist, sk.sp, sk.sr, flags)
