"""Versioned JSON checkpoints. Floats are stored as ``repr`` strings, which round-trip exactly."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import CheckpointShapeError, CheckpointVersionError, MalformedCheckpointError
from .nets import Architecture, NetworkWeights

FORMAT_VERSION = 1


def _encode(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [repr(float(x)) for x in a.reshape(-1)]}


def _decode(d: dict, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in d["shape"])
        data = np.array([float(x) for x in d["data"]], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCheckpointError(f"bad array entry {name!r}: {exc}") from exc
    if data.size != int(np.prod(shape)):
        raise CheckpointShapeError(f"{name}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape)


def save_checkpoint(weights: NetworkWeights, path, ppo_config: dict | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "architecture": weights.arch.to_dict(),
        "params": {k: _encode(v) for k, v in sorted(weights.params.items())},
        "optimizer": {
            "step": weights.step,
            "m": {k: _encode(v) for k, v in sorted(weights.adam_m.items())},
            "v": {k: _encode(v) for k, v in sorted(weights.adam_v.items())},
        },
        "ppo_config": ppo_config,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> NetworkWeights:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise MalformedCheckpointError("missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(FORMAT_VERSION, doc["format_version"])
    try:
        arch = Architecture.from_dict(doc["architecture"])
        params = {k: _decode(v, k) for k, v in doc["params"].items()}
        opt = doc["optimizer"]
        m = {k: _decode(a, k) for k, a in opt["m"].items()}
        v = {k: _decode(a, k) for k, a in opt["v"].items()}
        step = int(opt["step"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCheckpointError(f"malformed checkpoint: {exc}") from exc
    expected = arch.param_shapes()
    if set(params) != set(expected):
        raise CheckpointShapeError(f"parameter names {sorted(params)} do not match architecture")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise CheckpointShapeError(f"{k}: expected shape {shape}, found {params[k].shape}")
        for buf in (m, v):
            if k in buf and buf[k].shape != shape:
                raise CheckpointShapeError(f"optimizer moment {k}: expected shape {shape}, found {buf[k].shape}")
    return NetworkWeights(arch, params, m, v, step)
