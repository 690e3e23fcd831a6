"""Command-line entry point: ``ctnvessel {gen-data,train,evaluate,predict,ablate}``.

Every command reads one JSON config (all sections optional), applies
``--set section.key=value`` overrides, writes the resolved config next to
its outputs, and exits 0 on success or with a category-specific code and a
one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from .config import ConfigError, apply_overrides, from_dict, load_file, to_dict
from .fusion import CtnConfig, ablation_configs, fusion_mode_configs
from .metrics import evaluate as evaluate_pair
from .metrics import write_cohort_report
from .metrics.report import TABLE_COLUMNS, cohort_summary
from .train import NonFiniteLossError, TrainConfig, fit, save_state
from .volio import (
    ManifestRecord,
    PhantomSpec,
    VolumeFormatError,
    generate_phantom,
    iter_phantom_specs,
    label_path_for,
    read_manifest,
    read_mask,
    read_volume,
    select_split,
    write_manifest,
    write_mask,
    write_volume,
)

OUTPUT_ROOT_ENV = "CTNVESSEL_OUTPUT_ROOT"
EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3, 4

log = logging.getLogger("ctnvessel")


@dataclass
class DataConfig:
    count: int = 10
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0:
            raise ValueError("split_fractions needs three nonnegative fractions (train, val, test)")
        if sum(self.split_fractions) > 1 + 1e-9:
            raise ValueError("split_fractions must sum to at most 1")

    def split_counts(self) -> Tuple[int, int, int]:
        n_train = int(math.floor(self.split_fractions[0] * self.count + 0.5))
        n_val = int(math.floor(self.split_fractions[1] * self.count + 0.5))
        n_val = min(n_val, self.count - n_train)
        return n_train, n_val, self.count - n_train - n_val


@dataclass
class EvaluateConfig:
    checkpoint: Optional[str] = None
    pred_dir: Optional[str] = None
    split: str = "test"
    skeleton_labels: str = "foreground"
    save_predictions: bool = False


@dataclass
class PredictConfig:
    checkpoint: Optional[str] = None
    inputs: Tuple[str, ...] = ()
    split: Optional[str] = None


@dataclass
class AblateConfig:
    tables: Tuple[str, ...] = ("stages", "modes")
    split: str = "test"

    def __post_init__(self):
        self.tables = tuple(self.tables)
        bad = set(self.tables) - {"stages", "modes"}
        if bad:
            raise ValueError(f"unknown ablation tables {sorted(bad)}")


@dataclass
class RunConfig:
    output_dir: Optional[str] = None
    manifest: Optional[str] = None
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: CtnConfig = field(default_factory=CtnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


class DataError(RuntimeError):
    pass


def resolve_config(config_path, overrides) -> RunConfig:
    data = load_file(config_path) if config_path else {}
    return from_dict(RunConfig, apply_overrides(data, overrides))


def output_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.output_dir or f"runs/{command}")
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def freeze_config(cfg: RunConfig, out: Path, command: str) -> Path:
    path = out / f"{command}.config.json"
    path.write_text(json.dumps(to_dict(cfg), indent=2) + "\n")
    return path


def _require(value, what: str):
    if not value:
        raise ConfigError(f"{what} is required")
    return value


def _manifest(cfg: RunConfig) -> list[ManifestRecord]:
    path = Path(_require(cfg.manifest, "manifest"))
    if not path.is_file():
        raise DataError(f"manifest {path} not found")
    return read_manifest(path)


def case_name(record: ManifestRecord) -> str:
    name = Path(record.image).name
    return name[: -len(".hdr.json")] if name.endswith(".hdr.json") else Path(name).stem


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out: Path) -> dict:
    n_train, n_val, n_test = cfg.data.split_counts()
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    records = []
    for i, (spec, split) in enumerate(zip(iter_phantom_specs(cfg.phantom, cfg.data.count), splits)):
        volume, mask = generate_phantom(spec)
        base = out / "cases" / f"case_{i:04d}"
        img = write_volume(volume, mask, base)
        records.append(ManifestRecord(str(img.relative_to(out)), str(label_path_for(base).relative_to(out)), split))
    manifest = write_manifest(records, out / "manifest.jsonl")
    return {"manifest": str(manifest), "counts": {"train": n_train, "val": n_val, "test": n_test}}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    records = _manifest(cfg)
    if not select_split(records, "train"):
        raise DataError("manifest has no train split")
    state = fit(cfg.model, cfg.train, records, out_dir=out)
    final = save_state(out / "final", state, cfg.model, cfg.train)
    return {"final": str(final), "best": str(out / "best"), "steps": state.step, "epochs": state.epoch,
            "best_val": state.best_val}


def _evaluate_records(cfg: RunConfig, records, out: Path, stem: str = "report"):
    from .inference import load_model, predict_volume

    ev = cfg.evaluate
    if not records:
        raise DataError(f"split {ev.split!r} is empty")
    model = None
    if ev.pred_dir is None:
        ckpt_path = Path(_require(ev.checkpoint, "evaluate.checkpoint (or evaluate.pred_dir)"))
        if not (ckpt_path / "manifest.json").is_file():
            raise DataError(f"checkpoint {ckpt_path} not found")
        model, _ = load_model(ckpt_path)
    rows = []
    for rec in records:
        gt = read_mask(rec.label)
        if model is None:
            pred_path = label_path_for(Path(ev.pred_dir) / case_name(rec))
            if not pred_path.is_file():
                raise DataError(f"no prediction {pred_path} for {rec.image}")
            pred = read_mask(pred_path)
        else:
            volume, _ = read_volume(rec.image)
            pred = predict_volume(model, volume)
            if ev.save_predictions:
                write_mask(pred, label_path_for(out / "predictions" / case_name(rec)), volume.origin)
        rows.append((case_name(rec), evaluate_pair(pred, gt, ev.skeleton_labels)))
    tsv, js = write_cohort_report(rows, out, stem)
    return rows, tsv, js


def cmd_evaluate(cfg: RunConfig, out: Path) -> dict:
    records = select_split(_manifest(cfg), cfg.evaluate.split)
    rows, tsv, js = _evaluate_records(cfg, records, out)
    return {"report": str(tsv), "summary": str(js), "mean": cohort_summary(rows)["mean"]}


def cmd_predict(cfg: RunConfig, out: Path) -> dict:
    from .inference import load_model, predict_volume

    pc = cfg.predict
    ckpt_path = Path(_require(pc.checkpoint, "predict.checkpoint"))
    if not (ckpt_path / "manifest.json").is_file():
        raise DataError(f"checkpoint {ckpt_path} not found")
    inputs = [Path(p) for p in pc.inputs]
    if pc.split is not None:
        inputs += [Path(r.image) for r in select_split(_manifest(cfg), pc.split)]
    if not inputs:
        raise ConfigError("predict needs predict.inputs or predict.split with a manifest")
    model, _ = load_model(ckpt_path)
    written = []
    for path in inputs:
        volume, _ = read_volume(path)
        mask = predict_volume(model, volume)
        name = path.name[: -len(".hdr.json")] if path.name.endswith(".hdr.json") else path.stem
        written.append(str(write_mask(mask, label_path_for(out / name), volume.origin)))
    return {"predictions": written}


def _table_rows(results, kind: str) -> list[dict]:
    rows = []
    for name, model_cfg, summary in results:
        row = {"name": name}
        if kind == "stages":
            for i in range(1, 5):
                row[f"F{i}{model_cfg.fusion.swin_stage_for(i)}"] = i in model_cfg.fusion.enabled_stages
        else:
            row["mode"] = model_cfg.fusion.mode
        row.update(summary["mean"])
        rows.append(row)
    return rows


def _write_table(rows: list[dict], path_stem: Path) -> None:
    headers = list(rows[0])
    with path_stem.with_suffix(".tsv").open("w") as fh:
        fh.write("\t".join(headers) + "\n")
        for r in rows:
            cells = []
            for h in headers:
                v = r[h]
                cells.append(("x" if v else "-") if isinstance(v, bool) else (f"{v:.4f}" if isinstance(v, float) else str(v)))
            fh.write("\t".join(cells) + "\n")
    path_stem.with_suffix(".json").write_text(json.dumps(rows, indent=2) + "\n")


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    from dataclasses import replace

    records = _manifest(cfg)
    test = select_split(records, cfg.ablate.split)
    if not test:
        raise DataError(f"split {cfg.ablate.split!r} is empty")
    grids = {"stages": ablation_configs(cfg.model), "modes": fusion_mode_configs(cfg.model)}
    written = {}
    for table in cfg.ablate.tables:
        results = []
        for name, model_cfg in grids[table]:
            run_dir = out / table / name
            run_dir.mkdir(parents=True, exist_ok=True)
            log.info("ablate %s: training %s", table, name)
            state = fit(model_cfg, cfg.train, records, out_dir=run_dir)
            final = save_state(run_dir / "final", state, model_cfg, cfg.train)
            run_cfg = replace(cfg, model=model_cfg,
                              evaluate=replace(cfg.evaluate, checkpoint=str(final), pred_dir=None, split=cfg.ablate.split))
            rows, _, _ = _evaluate_records(run_cfg, test, run_dir)
            results.append((name, model_cfg, cohort_summary(rows)))
        table_rows = _table_rows(results, table)
        _write_table(table_rows, out / f"ablation_{table}")
        written[table] = {"rows": len(table_rows), "table": str(out / f"ablation_{table}.tsv")}
    return written


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctnvessel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable); VALUE is parsed as JSON when possible")
        p.add_argument("-o", "--output-dir", help="shortcut for --set output_dir=...")
        p.add_argument("-m", "--manifest", help="shortcut for --set manifest=...")
    return parser


def _fail(category: str, code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": category, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if args.manifest:
        overrides.append(f"manifest={json.dumps(args.manifest)}")
    try:
        cfg = resolve_config(args.config, overrides)
        out = output_dir(cfg, args.command)
        freeze_config(cfg, out, args.command)
        result = COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (DataError, VolumeFormatError, FileNotFoundError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except NonFiniteLossError as exc:
        return _fail("runtime", EXIT_RUNTIME, exc)
    except OSError as exc:
        return _fail("io", EXIT_DATA, exc)
    sys.stdout.write(json.dumps({"command": args.command, "output_dir": str(out), **result}, default=str) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
