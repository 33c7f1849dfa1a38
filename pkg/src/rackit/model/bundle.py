"""Model configuration, weight bundles, and seeded generation.

The architecture is a byte-level pre-norm decoder: learned token and position
embeddings, per-block causal multi-head attention and a GELU MLP, a final
LayerNorm, and an output projection back to the 256-byte vocabulary. Byte
0x00 doubles as the stop symbol during decoding.

Six weight slots per block are eligible for compression; embeddings, norms,
and the output projection are never touched.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ValidationError

__all__ = [
    "SLOTS",
    "ModelConfig",
    "PrunableLayerRef",
    "LayerWeights",
    "ModelBundle",
    "all_refs",
    "sort_refs",
    "parse_ref",
    "slot_shape",
    "slot_input_dim",
    "get_weight",
    "apply_compressed",
    "generate_model",
    "named_tensors",
    "config_as_dict",
    "model_content_hash",
]

SLOTS = ("attn_q", "attn_k", "attn_v", "attn_out", "mlp_up", "mlp_down")

BYTE_VOCAB = 256


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    d_mlp: int
    max_positions: int
    vocab_size: int = BYTE_VOCAB
    layernorm_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_mlp", "max_positions"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size != BYTE_VOCAB:
            raise ValidationError(
                f"vocab_size is fixed at {BYTE_VOCAB} (byte-level), got {self.vocab_size}"
            )
        if self.d_model % self.n_heads != 0:
            raise ValidationError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if self.layernorm_epsilon <= 0:
            raise ValidationError("layernorm_epsilon must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class PrunableLayerRef:
    """Addresses one compressible weight matrix: (block index, slot name)."""

    layer_index: int
    slot: str

    def __post_init__(self):
        if self.slot not in SLOTS:
            raise ValidationError(f"unknown slot {self.slot!r}, expected one of {SLOTS}")
        if self.layer_index < 0:
            raise ValidationError(f"layer_index must be >= 0, got {self.layer_index}")

    def __str__(self) -> str:
        return f"{self.layer_index}.{self.slot}"


def parse_ref(text: str) -> PrunableLayerRef:
    layer, _, slot = text.partition(".")
    try:
        idx = int(layer)
    except ValueError:
        raise ValidationError(f"bad ref {text!r}, expected '<layer>.<slot>'") from None
    return PrunableLayerRef(idx, slot)


def sort_refs(refs) -> tuple[PrunableLayerRef, ...]:
    return tuple(sorted(set(refs), key=lambda r: (r.layer_index, SLOTS.index(r.slot))))


def all_refs(config: ModelConfig) -> tuple[PrunableLayerRef, ...]:
    return tuple(
        PrunableLayerRef(i, slot) for i in range(config.n_layers) for slot in SLOTS
    )


@dataclass(frozen=True)
class LayerWeights:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    attn_q: np.ndarray
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_out: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    mlp_up: np.ndarray
    mlp_down: np.ndarray


@dataclass(frozen=True)
class ModelBundle:
    """Immutable-by-convention weight container; arrays are float64 in memory."""

    config: ModelConfig
    token_embedding: np.ndarray
    position_embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm_gain: np.ndarray
    final_norm_bias: np.ndarray
    output_projection: np.ndarray
    provenance: dict = field(default_factory=dict)


def slot_shape(config: ModelConfig, slot: str) -> tuple[int, int]:
    """(d_out, d_in) of a slot's weight matrix; rows act on input columns."""
    d, m = config.d_model, config.d_mlp
    shapes = {
        "attn_q": (d, d),
        "attn_k": (d, d),
        "attn_v": (d, d),
        "attn_out": (d, d),
        "mlp_up": (m, d),
        "mlp_down": (d, m),
    }
    if slot not in shapes:
        raise ValidationError(f"unknown slot {slot!r}")
    return shapes[slot]


def slot_input_dim(config: ModelConfig, slot: str) -> int:
    return slot_shape(config, slot)[1]


def _check_layer(bundle: ModelBundle, ref: PrunableLayerRef) -> None:
    if ref.layer_index >= bundle.config.n_layers:
        raise ValidationError(
            f"ref {ref} out of range for a {bundle.config.n_layers}-layer model"
        )


def get_weight(bundle: ModelBundle, ref: PrunableLayerRef) -> np.ndarray:
    _check_layer(bundle, ref)
    return getattr(bundle.layers[ref.layer_index], ref.slot)


def apply_compressed(bundle: ModelBundle, ref: PrunableLayerRef, weights) -> ModelBundle:
    """Return a bundle with one slot replaced; everything else is shared."""
    _check_layer(bundle, ref)
    arr = np.array(weights, dtype=np.float64)
    expected = slot_shape(bundle.config, ref.slot)
    if arr.shape != expected:
        raise ValidationError(
            f"weights for {ref} must have shape {expected}, got {arr.shape}"
        )
    if not np.isfinite(arr).all():
        raise ValidationError(f"weights for {ref} contain non-finite entries")
    layers = list(bundle.layers)
    layers[ref.layer_index] = replace(layers[ref.layer_index], **{ref.slot: arr})
    return replace(bundle, layers=layers)


def generate_model(config: ModelConfig, seed: int) -> ModelBundle:
    """Seeded random bundle, bit-identical for the same (config, seed).

    Matrix weights are standard normal scaled by 1/sqrt(d_model) and snapped
    to float32 so container round-trips are lossless; norm gains start at one
    and biases at zero. The draw order below is part of the determinism
    contract and must not change.
    """
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.d_model)

    def draw(*shape):
        w = rng.standard_normal(shape) * scale
        return w.astype(np.float32).astype(np.float64)

    token_embedding = draw(config.vocab_size, config.d_model)
    position_embedding = draw(config.max_positions, config.d_model)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                ln1_gain=np.ones(config.d_model),
                ln1_bias=np.zeros(config.d_model),
                attn_q=draw(config.d_model, config.d_model),
                attn_k=draw(config.d_model, config.d_model),
                attn_v=draw(config.d_model, config.d_model),
                attn_out=draw(config.d_model, config.d_model),
                ln2_gain=np.ones(config.d_model),
                ln2_bias=np.zeros(config.d_model),
                mlp_up=draw(config.d_mlp, config.d_model),
                mlp_down=draw(config.d_model, config.d_mlp),
            )
        )
    output_projection = draw(config.vocab_size, config.d_model)
    return ModelBundle(
        config=config,
        token_embedding=token_embedding,
        position_embedding=position_embedding,
        layers=layers,
        final_norm_gain=np.ones(config.d_model),
        final_norm_bias=np.zeros(config.d_model),
        output_projection=output_projection,
        provenance={"kind": "random", "seed": int(seed)},
    )


def named_tensors(bundle: ModelBundle):
    """Canonical (name, array) iteration order used by hashing and containers."""
    yield "token_embedding", bundle.token_embedding
    yield "position_embedding", bundle.position_embedding
    for i, lw in enumerate(bundle.layers):
        yield f"layers.{i}.ln1.gain", lw.ln1_gain
        yield f"layers.{i}.ln1.bias", lw.ln1_bias
        yield f"layers.{i}.attn_q", lw.attn_q
        yield f"layers.{i}.attn_k", lw.attn_k
        yield f"layers.{i}.attn_v", lw.attn_v
        yield f"layers.{i}.attn_out", lw.attn_out
        yield f"layers.{i}.ln2.gain", lw.ln2_gain
        yield f"layers.{i}.ln2.bias", lw.ln2_bias
        yield f"layers.{i}.mlp_up", lw.mlp_up
        yield f"layers.{i}.mlp_down", lw.mlp_down
    yield "final_norm.gain", bundle.final_norm_gain
    yield "final_norm.bias", bundle.final_norm_bias
    yield "output_projection", bundle.output_projection


def config_as_dict(config: ModelConfig) -> dict:
    return {
        "vocab_size": config.vocab_size,
        "d_model": config.d_model,
        "n_layers": config.n_layers,
        "n_heads": config.n_heads,
        "d_mlp": config.d_mlp,
        "max_positions": config.max_positions,
        "layernorm_epsilon": config.layernorm_epsilon,
    }


def model_content_hash(bundle: ModelBundle) -> str:
    """SHA-256 over the config and float32 tensor bytes; ignores provenance."""
    h = hashlib.sha256()
    h.update(json.dumps(config_as_dict(bundle.config), separators=(",", ":")).encode())
    for name, arr in named_tensors(bundle):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def validate_bundle(bundle: ModelBundle) -> None:
    cfg = bundle.config
    expected = {
        "token_embedding": (cfg.vocab_size, cfg.d_model),
        "position_embedding": (cfg.max_positions, cfg.d_model),
        "final_norm.gain": (cfg.d_model,),
        "final_norm.bias": (cfg.d_model,),
        "output_projection": (cfg.vocab_size, cfg.d_model),
    }
    for i in range(cfg.n_layers):
        expected[f"layers.{i}.ln1.gain"] = (cfg.d_model,)
        expected[f"layers.{i}.ln1.bias"] = (cfg.d_model,)
        expected[f"layers.{i}.ln2.gain"] = (cfg.d_model,)
        expected[f"layers.{i}.ln2.bias"] = (cfg.d_model,)
        for slot in SLOTS:
            expected[f"layers.{i}.{slot}"] = slot_shape(cfg, slot)
    if len(bundle.layers) != cfg.n_layers:
        raise ValidationError(
            f"bundle has {len(bundle.layers)} layers, config says {cfg.n_layers}"
        )
    for name, arr in named_tensors(bundle):
        if arr.shape != expected[name]:
            raise ValidationError(
                f"tensor {name} has shape {arr.shape}, expected {expected[name]}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError(f"tensor {name} contains non-finite entries")
