"""Cohort tables: one row per volume plus a mean row, as TSV and JSON."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence, Tuple

from .core import MetricsReport

# (report field, table header, scale to the printed unit)
TABLE_COLUMNS = (
    ("dice", "DICE(%)", 100.0),
    ("dice_a", "DICE_A(%)", 100.0),
    ("dice_c", "DICE_C(%)", 100.0),
    ("assd_mm", "ASSD(mm)", 1.0),
    ("sp", "SP(%)", 100.0),
    ("sr", "SR(%)", 100.0),
)


def _mean(values):
    finite = [v for v in values if not math.isnan(v)]
    return sum(finite) / len(finite) if finite else math.nan


def cohort_summary(rows: Sequence[Tuple[str, MetricsReport]]) -> dict:
    if not rows:
        raise ValueError("cohort is empty")
    mean = {f: _mean([getattr(r, f) for _, r in rows]) for f, _, _ in TABLE_COLUMNS}
    return {
        "columns": [h for _, h, _ in TABLE_COLUMNS],
        "n_volumes": len(rows),
        "mean": {h: mean[f] * scale for f, h, scale in TABLE_COLUMNS},
        "per_volume": [
            {"case": case, **{h: getattr(r, f) * scale for f, h, scale in TABLE_COLUMNS}, "flags": r.flags}
            for case, r in rows
        ],
    }


def write_cohort_report(rows: Sequence[Tuple[str, MetricsReport]], out_dir, stem: str = "report") -> Tuple[Path, Path]:
    """Write ``<stem>.tsv`` and ``<stem>.json``; NaN entries mark undefined values."""
    summary = cohort_summary(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = out_dir / f"{stem}.tsv"
    with tsv.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["case", *summary["columns"], "flags"])
        for row in summary["per_volume"]:
            w.writerow([row["case"], *(f"{row[h]:.4f}" for h in summary["columns"]), ",".join(row["flags"])])
        w.writerow(["mean", *(f"{summary['mean'][h]:.4f}" for h in summary["columns"]), ""])
    js = out_dir / f"{stem}.json"
    js.write_text(json.dumps(summary, indent=2, allow_nan=True) + "\n")
    return tsv, js
