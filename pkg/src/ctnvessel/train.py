"""Training loop: soft-Dice + cross-entropy loss, AdamW with step decay,
per-epoch checkpoints and best-by-validation tracking."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .config import from_dict, to_dict
from .fusion import CTN, CtnConfig
from .volio import LabelMask, ManifestRecord, Volume, read_manifest, read_mask, read_volume, resize_labels, resize_volume, select_split

log = logging.getLogger(__name__)

SOFT_DICE_EPS = 1e-5
FOREGROUND_CLASSES = (1, 2)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    base_lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 50
    weight_decay: float = 1e-4
    first_moment_decay: float = 0.9
    second_moment_decay: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    loss_weights: Tuple[float, float] = (1.0, 1.0)
    flip_prob: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    val_fraction: float = 0.1
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.flip_prob = tuple(float(p) for p in self.flip_prob)
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.lr_decay_every < 1 or self.epochs < 1:
            raise ValueError("epochs and lr_decay_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0:
            raise ValueError("loss_weights must be two nonnegative numbers (dice, ce)")
        if len(self.flip_prob) != 3 or not all(0 <= p <= 1 for p in self.flip_prob):
            raise ValueError("flip_prob needs three probabilities")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``base_lr * factor ** (epoch // every)``, rounded once from the exact decimal."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    k = epoch // cfg.lr_decay_every
    return float(Decimal(repr(cfg.base_lr)) * Decimal(repr(cfg.lr_decay_factor)) ** k)


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, classes: Sequence[int] = FOREGROUND_CLASSES) -> torch.Tensor:
    probs = logits.softmax(dim=1)
    losses = []
    for c in classes:
        p = probs[:, c]
        g = (target == c).to(p.dtype)
        inter = (p * g).sum()
        losses.append(1 - (2 * inter + SOFT_DICE_EPS) / (p.sum() + g.sum() + SOFT_DICE_EPS))
    return torch.stack(losses).mean()


def loss_fn(logits: torch.Tensor, target: torch.Tensor, weights: Tuple[float, float] = (1.0, 1.0)) -> torch.Tensor:
    """``dice_w * soft-Dice(classes 1, 2) + ce_w * mean voxel cross-entropy``."""
    if logits.ndim != 5 or logits.shape[1] < 3:
        raise ValueError(f"logits must be [B, 3, D, H, W], got {list(logits.shape)}")
    if target.shape != (logits.shape[0], *logits.shape[2:]):
        raise ValueError(f"target shape {list(target.shape)} does not match logits {list(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise NonFiniteLossError("non-finite logits")
    dice_w, ce_w = weights
    target = target.long()
    return dice_w * soft_dice_loss(logits, target) + ce_w * F.cross_entropy(logits, target)


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    best_val: Optional[float] = None
    best_epoch: Optional[int] = None
    losses: List[float] = field(default_factory=list)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.base_lr, betas=(cfg.first_moment_decay, cfg.second_moment_decay),
        eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
    )


def init_state(model_cfg: CtnConfig, cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = CTN(model_cfg)
    return TrainState(model, make_optimizer(model, cfg), np.random.default_rng(cfg.seed))


def state_arrays(state: TrainState) -> Dict[str, torch.Tensor]:
    arrays = dict(state.model.state_dict())
    names = {id(p): n for n, p in state.model.named_parameters()}
    for p, s in state.optimizer.state.items():
        for key, value in s.items():
            arrays[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(value)
    return arrays


def save_state(path, state: TrainState, model_cfg: CtnConfig, cfg: TrainConfig) -> Path:
    meta = {
        "kind": "train_state",
        "model_config": to_dict(model_cfg),
        "train_config": to_dict(cfg),
        "epoch": state.epoch,
        "step": state.step,
        "best_val": state.best_val,
        "best_epoch": state.best_epoch,
        "rng": state.rng.bit_generator.state,
        "lr": [g["lr"] for g in state.optimizer.param_groups],
    }
    return ckpt.save_arrays(path, state_arrays(state), meta)


def model_config_from_meta(meta: dict) -> CtnConfig:
    return from_dict(CtnConfig, meta["model_config"], "model")


def load_state(path) -> Tuple[TrainState, CtnConfig, TrainConfig]:
    arrays, meta = ckpt.load_arrays(path)
    model_cfg = model_config_from_meta(meta)
    cfg = from_dict(TrainConfig, meta["train_config"], "train")
    model = CTN(model_cfg)
    ckpt.load_model_state(model, arrays)
    optimizer = make_optimizer(model, cfg)
    for n, p in model.named_parameters():
        prefix = f"optim.{n}."
        entries = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        if entries:
            optimizer.state[p] = {k: torch.from_numpy(np.array(v)) for k, v in entries.items()}
    for g, lr in zip(optimizer.param_groups, meta.get("lr", [])):
        g["lr"] = lr
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(model, optimizer, rng, meta["epoch"], meta["step"], meta["best_val"], meta["best_epoch"])
    return state, model_cfg, cfg


# ---------------------------------------------------------------------------
# data


def zscore(data: np.ndarray) -> np.ndarray:
    data = data.astype(np.float32)
    std = float(data.std())
    return (data - data.mean()) / (std if std > 0 else 1.0)


def prepare_pair(volume: Volume, mask: Optional[LabelMask], size: Sequence[int]) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Resize to the model grid and z-score; returns ([1,1,D,H,W] image, [1,D,H,W] labels)."""
    size = tuple(size)
    if volume.shape != size:
        volume = resize_volume(volume, size)
    x = torch.from_numpy(zscore(volume.data))[None, None]
    y = None
    if mask is not None:
        labels = mask.data if mask.shape == size else resize_labels(mask.data, size)
        y = torch.from_numpy(labels.astype(np.int64))[None]
    return x, y


def _flip(x: torch.Tensor, y: torch.Tensor, rng: np.random.Generator, probs) -> Tuple[torch.Tensor, torch.Tensor]:
    draws = rng.random(3)
    dims = [axis for axis in range(3) if draws[axis] < probs[axis]]
    if dims:
        x = torch.flip(x, [d + 2 for d in dims])
        y = torch.flip(y, [d + 1 for d in dims])
    return x, y


def load_record(record: ManifestRecord, size) -> Tuple[torch.Tensor, torch.Tensor]:
    volume, _ = read_volume(record.image)
    return prepare_pair(volume, read_mask(record.label), size)


# ---------------------------------------------------------------------------
# loop


def train_step(state: TrainState, image: torch.Tensor, label: torch.Tensor, cfg: TrainConfig) -> float:
    """One forward/backward/AdamW update; returns the loss before the update."""
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    logits = state.model(image)
    loss = loss_fn(logits, label, cfg.loss_weights)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()} at epoch {state.epoch}, step {state.step}")
    loss.backward()
    state.optimizer.step()
    state.step += 1
    value = float(loss.detach())
    state.losses.append(value)
    return value


@torch.no_grad()
def predict_labels(model: torch.nn.Module, image: torch.Tensor) -> torch.Tensor:
    model.eval()
    return model(image).argmax(dim=1)


def foreground_dice(pred: torch.Tensor, target: torch.Tensor) -> float:
    p, g = pred > 0, target > 0
    total = int(p.sum()) + int(g.sum())
    return 1.0 if total == 0 else 2.0 * int((p & g).sum()) / total


def split_records(records: Sequence[ManifestRecord], cfg: TrainConfig) -> Tuple[list, list]:
    train = select_split(records, "train")
    if not train:
        raise ValueError("manifest has no training records")
    val = select_split(records, "val")
    if not val and cfg.val_fraction > 0:
        n_val = int(math.floor(cfg.val_fraction * len(train)))
        if n_val:
            train, val = train[:-n_val], train[-n_val:]
    return train, val


def fit(
    model_cfg: CtnConfig,
    cfg: TrainConfig,
    manifest,
    out_dir=None,
    resume=None,
    on_epoch: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Train on the manifest's train split for ``cfg.epochs`` epochs (or ``cfg.max_steps`` updates).

    With ``out_dir``, writes ``last/`` every epoch, ``best/`` whenever the
    validation foreground Dice improves (or every epoch without a
    validation split), and a JSON-lines log ``train_log.jsonl``.
    """
    records = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    train_recs, val_recs = split_records(records, cfg)
    if resume is not None:
        state, model_cfg, _ = load_state(resume)
    else:
        state = init_state(model_cfg, cfg)
    size = model_cfg.input_size
    cache: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = {}

    def sample(rec):
        if rec.image not in cache:
            cache[rec.image] = load_record(rec, size)
        return cache[rec.image]

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "train_log.jsonl").open("a")
    try:
        while state.epoch < cfg.epochs:
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            lr = lr_at(state.epoch, cfg)
            for g in state.optimizer.param_groups:
                g["lr"] = lr
            order = state.rng.permutation(len(train_recs))
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    break
                xs, ys = [], []
                for idx in order[start:start + cfg.batch_size]:
                    x, y = _flip(*sample(train_recs[idx]), state.rng, cfg.flip_prob)
                    xs.append(x)
                    ys.append(y)
                loss = train_step(state, torch.cat(xs), torch.cat(ys), cfg)
                if log_fh:
                    log_fh.write(json.dumps({"epoch": state.epoch, "step": state.step, "lr": lr, "loss": loss}) + "\n")
            val = None
            if val_recs:
                val = float(np.mean([foreground_dice(predict_labels(state.model, x), y)
                                     for x, y in (sample(r) for r in val_recs)]))
            state.epoch += 1
            improved = val is None or state.best_val is None or val > state.best_val
            if improved:
                state.best_val, state.best_epoch = val, state.epoch - 1
            if log_fh:
                log_fh.write(json.dumps({"epoch": state.epoch - 1, "step": state.step, "val_dice": val}) + "\n")
                log_fh.flush()
            if out is not None:
                save_state(out / "last", state, model_cfg, cfg)
                if improved:
                    save_state(out / "best", state, model_cfg, cfg)
            log.info("epoch %d step %d lr %.3g val %s", state.epoch - 1, state.step, lr, val)
            if on_epoch:
                on_epoch(state)
    finally:
        if log_fh:
            log_fh.close()
    return state
