"""Checkpoints: a JSON manifest plus one raw little-endian float blob.

The manifest lists every named tensor (trainable and frozen) with its shape,
byte offset and byte length inside the blob, the blob's sha256, and the model
configuration needed to rebuild the architecture.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec
from .errors import CheckpointMismatch
from .model import StumConfig, StumModel

FORMAT = "stum-checkpoint"
VERSION = 1


def config_to_dict(config: StumConfig) -> dict:
    return asdict(config)


def config_from_dict(raw: dict) -> StumConfig:
    raw = dict(raw)
    backbone = raw.pop("backbone", None) or {}
    known = set(StumConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise CheckpointMismatch(f"unknown config keys {sorted(unknown)}")
    return StumConfig(backbone=BackboneSpec(**backbone), **raw)


def _paths(prefix: str | Path) -> tuple[Path, Path]:
    prefix = Path(prefix)
    return prefix.with_suffix(".json"), prefix.with_suffix(".bin")


def save_checkpoint(model: StumModel, prefix: str | Path, extra: dict | None = None) -> tuple[Path, Path]:
    manifest_path, blob_path = _paths(prefix)
    dtype = np.dtype(model.config.dtype).newbyteorder("<")
    entries = []
    chunks = []
    offset = 0
    for name, t in model.named_tensors():
        buf = np.ascontiguousarray(t.data, dtype=dtype).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(buf),
                "trainable": t.requires_grad,
            }
        )
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": model.config.dtype,
        "byte_order": "little",
        "config": config_to_dict(model.config),
        "tensors": entries,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path, blob_path


def read_manifest(prefix: str | Path) -> dict:
    manifest_path, _ = _paths(prefix)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointMismatch(f"cannot read checkpoint manifest {manifest_path}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointMismatch(f"{manifest_path} is not a {FORMAT} manifest")
    return manifest


def load_into(model: StumModel, prefix: str | Path) -> dict:
    """Copy stored tensors into ``model``; any disagreement raises CheckpointMismatch."""
    manifest = read_manifest(prefix)
    _, blob_path = _paths(prefix)
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointMismatch(f"cannot read checkpoint blob {blob_path}: {exc}") from None
    if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointMismatch(f"{blob_path} does not match its manifest (size or sha256)")
    dtype = np.dtype(manifest["dtype"]).newbyteorder("<")
    stored = {e["name"]: e for e in manifest["tensors"]}
    tensors = dict(model.named_tensors())
    if set(stored) != set(tensors):
        missing = sorted(set(tensors) - set(stored))
        extra = sorted(set(stored) - set(tensors))
        raise CheckpointMismatch(f"tensor names differ; missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in tensors.items():
        e = stored[name]
        if tuple(e["shape"]) != t.shape:
            raise CheckpointMismatch(f"{name}: stored shape {tuple(e['shape'])}, model has {t.shape}")
        raw = np.frombuffer(blob, dtype=dtype, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        t.data = raw.reshape(t.shape).astype(model.dtype)
    return manifest


def load_checkpoint(prefix: str | Path) -> tuple[StumModel, dict]:
    """Rebuild the model from the stored config and load its tensors."""
    manifest = read_manifest(prefix)
    model = StumModel(config_from_dict(manifest["config"]))
    load_into(model, prefix)
    model.eval()
    return model, manifest
