"""Checkpoints: a JSON manifest with base64 little-endian f64 arrays."""
from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any

import numpy as np

FORMAT = "cifvi-checkpoint/1"


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    shape = tuple(blob["shape"])
    if a.size != int(np.prod(shape)):
        raise ValueError(f"array payload has {a.size} values, shape {shape} needs {int(np.prod(shape))}")
    return a.reshape(shape)


def save_checkpoint(path, config: dict, params: dict[str, np.ndarray],
                    optimizer: dict[str, Any] | None = None, epoch: int = 0,
                    best_metric: float | None = None) -> None:
    """``optimizer`` may hold arrays (encoded) and plain JSON scalars."""
    opt = {}
    for key, value in (optimizer or {}).items():
        if isinstance(value, dict):
            opt[key] = {k: encode_array(v) for k, v in value.items()}
        else:
            opt[key] = value
    doc = {
        "format": FORMAT,
        "config": config,
        "epoch": epoch,
        "best_metric": best_metric,
        "parameters": {name: encode_array(a) for name, a in params.items()},
        "optimizer": opt,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a checkpoint (format={doc.get('format')!r})")
    doc["parameters"] = {k: decode_array(v) for k, v in doc["parameters"].items()}
    opt = {}
    for key, value in doc["optimizer"].items():
        opt[key] = {k: decode_array(v) for k, v in value.items()} if isinstance(value, dict) else value
    doc["optimizer"] = opt
    return doc
