"""Byte-level decoder model: weights, runtime, and on-disk container."""

from .bundle import (
    SLOTS,
    LayerWeights,
    ModelBundle,
    ModelConfig,
    PrunableLayerRef,
    all_refs,
    apply_compressed,
    config_as_dict,
    generate_model,
    get_weight,
    model_content_hash,
    named_tensors,
    parse_ref,
    slot_input_dim,
    slot_shape,
    sort_refs,
    validate_bundle,
)
from .container import atomic_write_bytes, load_model, save_model
from .runtime import (
    GREEDY,
    STOP_BYTE,
    DecodeState,
    Sampler,
    decode,
    forward_teacher_forced,
    last_layer_states,
)

__all__ = [
    "SLOTS",
    "STOP_BYTE",
    "GREEDY",
    "DecodeState",
    "LayerWeights",
    "ModelBundle",
    "ModelConfig",
    "PrunableLayerRef",
    "Sampler",
    "all_refs",
    "apply_compressed",
    "atomic_write_bytes",
    "config_as_dict",
    "decode",
    "forward_teacher_forced",
    "generate_model",
    "get_weight",
    "last_layer_states",
    "load_model",
    "model_content_hash",
    "named_tensors",
    "parse_ref",
    "save_model",
    "slot_input_dim",
    "slot_shape",
    "sort_refs",
    "validate_bundle",
]
