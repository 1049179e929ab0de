"""Versioned checkpoint files for trained models.

A checkpoint is a single JSON document with sorted keys: format tag,
version, the full run configuration, and one entry per named parameter
holding its shape and base64-encoded little-endian float64 bytes. Sampler
parameters live in a separate section appended after sampler training.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from .config import RunConfig, config_from_dict, config_to_dict

FORMAT_TAG = "socioformer-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable, mismatched, or wrong-format checkpoint."""


def _encode_params(named) -> dict:
    out = {}
    for name, tensor in named:
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        out[name] = {
            "shape": list(tensor.shape),
            "data": base64.b64encode(data.tobytes()).decode("ascii"),
        }
    return out


def _decode_params(section: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in section.items():
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        try:
            arr = arr.reshape(entry["shape"])
        except ValueError as exc:
            raise CheckpointError(f"parameter {name!r} is corrupt: {exc}") from exc
        out[name] = arr
    return out


def save_checkpoint(path: str, config: RunConfig, cvae_named,
                    sampler_named=None) -> None:
    doc = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "config": config_to_dict(config),
        "cvae": _encode_params(cvae_named),
        "sampler": _encode_params(sampler_named) if sampler_named is not None else None,
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path: str) -> tuple[RunConfig, dict, dict | None]:
    """Returns (config, cvae arrays by name, sampler arrays by name or None)."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path} is not a {FORMAT_TAG} file")
    if doc.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    config = config_from_dict(doc["config"])
    cvae = _decode_params(doc["cvae"])
    sampler = _decode_params(doc["sampler"]) if doc.get("sampler") else None
    return config, cvae, sampler


def restore_params(named, arrays: dict[str, np.ndarray], what: str) -> None:
    """Copy checkpoint arrays into freshly built parameters by name."""
    seen = set()
    for name, tensor in named:
        if name not in arrays:
            raise CheckpointError(f"{what}: checkpoint is missing parameter {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tensor.shape:
            raise CheckpointError(
                f"{what}: parameter {name!r} has shape {tuple(arr.shape)} in the "
                f"checkpoint but {tensor.shape} in the model (config mismatch)")
        tensor.data[...] = arr
        seen.add(name)
    extra = set(arrays) - seen
    if extra:
        raise CheckpointError(f"{what}: checkpoint has unknown parameters {sorted(extra)}")
