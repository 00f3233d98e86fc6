"""Checkpoint persistence: manifest.json plus a flat params.bin payload.

The payload is the concatenation of every parameter as little-endian
float64 in manifest order; byte offsets in the manifest partition the
payload exactly and a SHA-256 checksum ties the two files together.
Spectral weights store their (re, im) halves interleaved because their
trailing tensor axis is the pair axis.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .models import Model, ModelConfig, build_model

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "load_manifest"]

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint pair is inconsistent or unreadable."""


def save_checkpoint(directory, model: Model, *, extra: dict | None = None,
                    prefix: str = "") -> Path:
    """Write ``<prefix>manifest.json`` and ``<prefix>params.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for p in model.parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({
            "name": p.name,
            "shape": list(p.value.shape),
            "dtype": "f8",
            "offset": offset,
            "nbytes": len(raw),
            "complex_pairs": p.complex_pairs,
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "params": entries,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        manifest.update(extra)
    (directory / f"{prefix}params.bin").write_bytes(payload)
    with open(directory / f"{prefix}manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return directory


def load_manifest(directory, prefix: str = "") -> dict:
    path = Path(directory) / f"{prefix}manifest.json"
    if not path.exists():
        raise CheckpointError(f"missing manifest: {path}")
    with open(path) as f:
        return json.load(f)


def load_checkpoint(directory, prefix: str = "") -> tuple[Model, dict]:
    """Rebuild the model named by the manifest and load its parameters."""
    directory = Path(directory)
    manifest = load_manifest(directory, prefix)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    payload = (directory / f"{prefix}params.bin").read_bytes()
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError("payload size does not match the manifest")
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CheckpointError("params.bin checksum does not match the manifest")
    config = ModelConfig.from_dict(manifest["model_config"])
    model = build_model(config)
    params = {p.name: p for p in model.parameters()}
    if [e["name"] for e in manifest["params"]] != [p.name for p in model.parameters()]:
        raise CheckpointError("manifest parameter list does not match the model")
    for entry in manifest["params"]:
        p = params[entry["name"]]
        arr = np.frombuffer(
            payload, dtype="<f8", count=entry["nbytes"] // 8, offset=entry["offset"]
        ).reshape(entry["shape"])
        p.data = arr.astype(p.value.dtype)
    return model, manifest
