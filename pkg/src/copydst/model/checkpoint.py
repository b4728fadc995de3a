"""Versioned ``.npz`` checkpoints: named tensors plus a JSON metadata entry."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..ontology import Ontology
from .config import TrainConfig
from .network import DSTModel

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(model: DSTModel, path: str | Path, extra: dict | None = None) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_json(),
        "vocab": model.vocab,
        "ontology": model.ontology.to_json(),
        "shapes": {k: list(v.shape) for k, v in sorted(model.params.items())},
        "extra": extra or {},
    }
    arrays = {k: v for k, v in model.params.items()}
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path: str | Path) -> tuple[DSTModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        if _META_KEY not in z.files:
            raise ValueError(f"{path}: not a checkpoint (no metadata entry)")
        meta = json.loads(z[_META_KEY].tobytes().decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        params = {k: z[k] for k in z.files if k != _META_KEY}
    for k, shape in meta["shapes"].items():
        if k not in params or list(params[k].shape) != shape:
            raise ValueError(f"{path}: tensor {k!r} missing or misshapen")
    ontology = Ontology.from_json(meta["ontology"])
    cfg = TrainConfig.from_json(meta["config"])
    return DSTModel(ontology, meta["vocab"], cfg, params=params), meta.get("extra", {})
