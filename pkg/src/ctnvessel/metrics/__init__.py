"""Segmentation metrics: Dice, average symmetric surface distance and
skeleton recall/precision built on topology-preserving thinning."""

from .core import (
    AssdUndefinedError,
    BinaryMask,
    MetricsReport,
    SkeletonScores,
    assd,
    dice,
    dice_with_flag,
    evaluate,
    extract_surface,
    skeleton_metrics,
    surface_mask,
)
from .report import cohort_summary, write_cohort_report
from .skeleton import BACKENDS, DEFAULT_BACKEND, skeletonize

__all__ = [
    "AssdUndefinedError", "BinaryMask", "MetricsReport", "SkeletonScores", "assd", "dice",
    "dice_with_flag", "evaluate", "extract_surface", "skeleton_metrics", "surface_mask",
    "cohort_summary", "write_cohort_report", "BACKENDS", "DEFAULT_BACKEND", "skeletonize",
]
