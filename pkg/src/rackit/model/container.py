"""TMC v1 weight container.

Layout: magic ``TMC1``, an unsigned 64-bit little-endian manifest length, the
UTF-8 JSON manifest, then one blob of little-endian float32 tensor data. The
manifest records the model config, a tensor directory mapping each name to
{shape, offset, length} (offsets relative to the blob start, tensors
concatenated in directory order), and free-form provenance. Tensors are
row-major. Saving is atomic (temp file + rename) and re-saving a loaded
bundle reproduces the input bytes exactly.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import ContainerError
from .bundle import (
    LayerWeights,
    ModelBundle,
    ModelConfig,
    config_as_dict,
    named_tensors,
    validate_bundle,
)

__all__ = ["save_model", "load_model", "atomic_write_bytes"]

MAGIC = b"TMC1"
_HEADER = struct.Struct("<Q")


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_model(bundle: ModelBundle, path) -> None:
    directory = {}
    parts = []
    offset = 0
    for name, arr in named_tensors(bundle):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory[name] = {"shape": list(arr.shape), "offset": offset, "length": len(raw)}
        parts.append(raw)
        offset += len(raw)
    manifest = {
        "format": "TMC",
        "version": 1,
        "config": config_as_dict(bundle.config),
        "tensors": directory,
        "provenance": bundle.provenance,
    }
    mbytes = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    payload = MAGIC + _HEADER.pack(len(mbytes)) + mbytes + b"".join(parts)
    atomic_write_bytes(path, payload)


def _read_tensor(blob: bytes, directory: dict, name: str, expected_shape) -> np.ndarray:
    entry = directory.get(name)
    if entry is None:
        raise ContainerError(f"tensor {name!r} missing from container")
    shape = tuple(entry["shape"])
    if shape != tuple(expected_shape):
        raise ContainerError(
            f"tensor {name!r} has shape {shape}, expected {tuple(expected_shape)}"
        )
    count = int(np.prod(shape)) if shape else 1
    if entry["length"] != count * 4:
        raise ContainerError(f"tensor {name!r} length does not match its shape")
    if entry["offset"] + entry["length"] > len(blob):
        raise ContainerError(f"tensor {name!r} overruns the data blob")
    flat = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
    return flat.astype(np.float64).reshape(shape)


def load_model(path) -> ModelBundle:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + _HEADER.size or data[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: not a TMC container")
    (mlen,) = _HEADER.unpack_from(data, len(MAGIC))
    body_start = len(MAGIC) + _HEADER.size
    if body_start + mlen > len(data):
        raise ContainerError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[body_start : body_start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: bad manifest ({exc})") from exc
    if manifest.get("format") != "TMC" or manifest.get("version") != 1:
        raise ContainerError(f"{path}: unsupported container version")
    try:
        config = ModelConfig(**manifest["config"])
    except (KeyError, TypeError) as exc:
        raise ContainerError(f"{path}: bad config block ({exc})") from exc
    blob = data[body_start + mlen :]
    directory = manifest.get("tensors", {})

    def take(name, shape):
        return _read_tensor(blob, directory, name, shape)

    d, m = config.d_model, config.d_mlp
    layers = []
    for i in range(config.n_layers):
        layers.append(
            LayerWeights(
                ln1_gain=take(f"layers.{i}.ln1.gain", (d,)),
                ln1_bias=take(f"layers.{i}.ln1.bias", (d,)),
                attn_q=take(f"layers.{i}.attn_q", (d, d)),
                attn_k=take(f"layers.{i}.attn_k", (d, d)),
                attn_v=take(f"layers.{i}.attn_v", (d, d)),
                attn_out=take(f"layers.{i}.attn_out", (d, d)),
                ln2_gain=take(f"layers.{i}.ln2.gain", (d,)),
                ln2_bias=take(f"layers.{i}.ln2.bias", (d,)),
                mlp_up=take(f"layers.{i}.mlp_up", (m, d)),
                mlp_down=take(f"layers.{i}.mlp_down", (d, m)),
            )
        )
    bundle = ModelBundle(
        config=config,
        token_embedding=take("token_embedding", (config.vocab_size, d)),
        position_embedding=take("position_embedding", (config.max_positions, d)),
        layers=layers,
        final_norm_gain=take("final_norm.gain", (d,)),
        final_norm_bias=take("final_norm.bias", (d,)),
        output_projection=take("output_projection", (config.vocab_size, d)),
        provenance=manifest.get("provenance", {}),
    )
    validate_bundle(bundle)
    return bundle
