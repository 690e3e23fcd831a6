"""Portable checkpoints: a JSON manifest plus one flat little-endian payload.

Layout of a checkpoint directory::

    manifest.json   {"format", "meta", "tensors": [{name, shape, dtype, offset, nbytes}]}
    tensors.bin     concatenated C-order arrays
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

FORMAT = "ctnvessel-checkpoint/1"
_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "uint8": np.dtype("u1"),
}


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu()
        if value.dtype == torch.bfloat16 or value.dtype == torch.float16:
            value = value.float()
        return value.numpy()
    return np.asarray(value)


def save_arrays(path, arrays: Mapping[str, object], meta: dict | None = None) -> Path:
    """Write ``arrays`` (name -> tensor/array) and JSON-serialisable ``meta``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with (tmp / "tensors.bin").open("wb") as fh:
        for name, value in arrays.items():
            arr = _to_numpy(value)
            dtype_name = arr.dtype.name
            if dtype_name not in _DTYPES:
                raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
            data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes(order="C")
            fh.write(data)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype_name,
                            "offset": offset, "nbytes": len(data)})
            offset += len(data)
    manifest = {"format": FORMAT, "byte_order": "little", "meta": meta or {}, "tensors": entries}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    # replace atomically-ish so a crash never leaves a half-written checkpoint in place
    if path.exists():
        old = path.with_name(path.name + ".old")
        path.rename(old)
        tmp.rename(path)
        for f in old.iterdir():
            f.unlink()
        old.rmdir()
    else:
        tmp.rename(path)
    return path


def load_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{mf}: unknown checkpoint format {manifest.get('format')!r}")
    blob = (path / "tensors.bin").read_bytes()
    arrays = {}
    for e in manifest["tensors"]:
        dt = _DTYPES[e["dtype"]]
        chunk = blob[e["offset"]: e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ValueError(f"{path}: payload truncated at tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return arrays, manifest["meta"]


def save_model(path, model: torch.nn.Module, meta: dict | None = None) -> Path:
    return save_arrays(path, model.state_dict(), meta)


def load_model_state(model: torch.nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``prefix``-namespaced arrays into ``model``; every parameter must be present."""
    state = model.state_dict()
    missing = [k for k in state if prefix + k not in arrays]
    if missing:
        raise KeyError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}")
    new = {}
    for k, ref in state.items():
        arr = arrays[prefix + k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ValueError(f"{k}: checkpoint shape {list(arr.shape)} != model shape {list(ref.shape)}")
        new[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    model.load_state_dict(new)
