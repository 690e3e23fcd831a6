"""Checkpoint loading and whole-volume prediction."""

from __future__ import annotations

from typing import Tuple

import numpy as np
import torch

from . import checkpoint as ckpt
from .fusion import CTN, CtnConfig
from .train import model_config_from_meta, prepare_pair
from .volio import LabelMask, Volume, resize_labels


def load_model(path) -> Tuple[CTN, CtnConfig]:
    arrays, meta = ckpt.load_arrays(path)
    if "model_config" not in meta:
        raise ValueError(f"{path}: checkpoint carries no model configuration")
    cfg = model_config_from_meta(meta)
    model = CTN(cfg)
    ckpt.load_model_state(model, arrays)
    model.eval()
    return model, cfg


@torch.no_grad()
def predict_volume(model: CTN, volume: Volume) -> LabelMask:
    """Argmax labels at the volume's own resolution.

    The volume is resized to the model grid and z-scored; the label map is
    mapped back with nearest-neighbour sampling.
    """
    model.eval()
    x, _ = prepare_pair(volume, None, model.cfg.input_size)
    labels = model(x).argmax(dim=1)[0].numpy().astype(np.uint8)
    if labels.shape != volume.shape:
        labels = resize_labels(labels, volume.shape)
    return LabelMask(labels, volume.spacing)
