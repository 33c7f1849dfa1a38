"""Calibration statistics: per-layer input Gram matrices.

Four ways to gather them, all reading activations from the target model:

* ``corpus``       - teacher-force chunks of an arbitrary byte stream.
* ``prompt_only``  - teacher-force the prompts themselves.
* ``rac``          - prompts plus the model's own decode rollouts: each prompt
  is continued autoregressively, the full sequence is teacher-forced once,
  and the columns at generated positions land in a separate decode Gram.
* ``off_policy``   - like ``rac`` but a different model writes the rollout;
  the target model is teacher-forced on the foreign trace, so the statistics
  are still the target's own activations.

Only Gram matrices and column counts are stored, never raw activation
matrices; within a sequence columns are accumulated one at a time in position
order, and sequences are consumed in input order, so a given collection is
bit-reproducible. Prompt-phase and decode-phase Grams are kept separate so one
collection pass can later serve both prompt-only and decode-aware compression.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContainerError, ValidationError
from .model import (
    ModelBundle,
    ModelConfig,
    PrunableLayerRef,
    atomic_write_bytes,
    decode,
    forward_teacher_forced,
    model_content_hash,
    slot_input_dim,
    sort_refs,
)
from .model.runtime import GREEDY, Sampler
from .numkernel import SymMatrix, accumulate_gram

logger = logging.getLogger(__name__)

__all__ = [
    "MODES",
    "CalibrationConfig",
    "LayerStats",
    "CalibrationSet",
    "collect_prompt_phase",
    "collect_decode_phase",
    "collect_corpus",
    "collect",
    "merged_gram",
    "prompt_digest",
    "load_prompt_file",
]

MODES = ("corpus", "prompt_only", "rac", "off_policy")

MAGIC = b"RACC"
_HEADER = struct.Struct("<Q")


@dataclass(frozen=True)
class CalibrationConfig:
    mode: str
    prompts: tuple = ()
    t_max: int = 0
    sampler: Sampler = GREEDY
    trace_model: ModelBundle | None = None
    token_budget: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown calibration mode {self.mode!r}")
        if self.t_max < 0:
            raise ValidationError("t_max must be >= 0")
        if self.mode in ("rac", "off_policy") and self.t_max == 0:
            raise ValidationError(f"mode {self.mode!r} requires t_max > 0")
        if self.mode == "off_policy" and self.trace_model is None:
            raise ValidationError("off_policy mode requires a trace model")
        if self.token_budget is not None and self.token_budget <= 0:
            raise ValidationError("token_budget must be positive when set")


@dataclass
class LayerStats:
    """Per-ref statistics: separate prompt and decode Grams plus column counts."""

    gram_prompt: SymMatrix
    gram_decode: SymMatrix
    n_prompt: int = 0
    n_decode: int = 0


class CalibrationSet:
    """Ordered map from prunable ref to :class:`LayerStats`, plus provenance."""

    def __init__(self, stats: dict[PrunableLayerRef, LayerStats], provenance=None):
        self.stats = dict(stats)
        self.provenance = dict(provenance or {})

    @classmethod
    def empty(cls, config: ModelConfig, refs, provenance=None) -> "CalibrationSet":
        refs = sort_refs(refs)
        if not refs:
            raise ValidationError("calibration needs at least one ref")
        stats = {}
        for r in refs:
            dim = slot_input_dim(config, r.slot)
            stats[r] = LayerStats(SymMatrix.zeros(dim), SymMatrix.zeros(dim))
        return cls(stats, provenance)

    @property
    def refs(self) -> tuple[PrunableLayerRef, ...]:
        return tuple(self.stats)

    def add_from(self, other: "CalibrationSet") -> None:
        if self.refs != other.refs:
            raise ValidationError("calibration sets cover different refs")
        for ref, st in self.stats.items():
            o = other.stats[ref]
            st.gram_prompt.data += o.gram_prompt.data
            st.gram_decode.data += o.gram_decode.data
            st.n_prompt += o.n_prompt
            st.n_decode += o.n_decode

    def content_digest(self) -> str:
        """SHA-256 over counts and Gram bytes; provenance is not included."""
        h = hashlib.sha256()
        for ref, st in self.stats.items():
            h.update(f"{ref}:{st.n_prompt}:{st.n_decode}".encode())
            h.update(np.ascontiguousarray(st.gram_prompt.data, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(st.gram_decode.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        refs_meta = []
        parts = []
        offset = 0
        for ref, st in self.stats.items():
            bp = np.ascontiguousarray(st.gram_prompt.data, dtype="<f8").tobytes()
            bd = np.ascontiguousarray(st.gram_decode.data, dtype="<f8").tobytes()
            refs_meta.append({
                "layer": ref.layer_index,
                "slot": ref.slot,
                "dim": st.gram_prompt.dim,
                "n_prompt": st.n_prompt,
                "n_decode": st.n_decode,
                "offset_prompt": offset,
                "offset_decode": offset + len(bp),
                "length": len(bp),
            })
            parts.extend((bp, bd))
            offset += len(bp) + len(bd)
        manifest = {
            "format": "RACC",
            "version": 1,
            "provenance": self.provenance,
            "refs": refs_meta,
        }
        mbytes = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
        atomic_write_bytes(path, MAGIC + _HEADER.pack(len(mbytes)) + mbytes + b"".join(parts))

    @classmethod
    def load(cls, path) -> "CalibrationSet":
        data = Path(path).read_bytes()
        if len(data) < len(MAGIC) + _HEADER.size or data[: len(MAGIC)] != MAGIC:
            raise ContainerError(f"{path}: not a calibration container")
        (mlen,) = _HEADER.unpack_from(data, len(MAGIC))
        start = len(MAGIC) + _HEADER.size
        if start + mlen > len(data):
            raise ContainerError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(data[start : start + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: bad manifest ({exc})") from exc
        if manifest.get("format") != "RACC" or manifest.get("version") != 1:
            raise ContainerError(f"{path}: unsupported calibration container")
        blob = data[start + mlen :]
        stats = {}
        for meta in manifest.get("refs", []):
            ref = PrunableLayerRef(meta["layer"], meta["slot"])
            dim = int(meta["dim"])
            need = dim * dim * 8
            if meta["length"] != need:
                raise ContainerError(f"{path}: Gram size mismatch for {ref}")
            if meta["offset_decode"] + need > len(blob):
                raise ContainerError(f"{path}: Gram data for {ref} overruns blob")

            def gram(off):
                flat = np.frombuffer(blob, dtype="<f8", count=dim * dim, offset=off)
                return SymMatrix(dim, flat.reshape(dim, dim).copy())

            stats[ref] = LayerStats(
                gram_prompt=gram(meta["offset_prompt"]),
                gram_decode=gram(meta["offset_decode"]),
                n_prompt=int(meta["n_prompt"]),
                n_decode=int(meta["n_decode"]),
            )
        if not stats:
            raise ContainerError(f"{path}: calibration container holds no refs")
        return cls(stats, manifest.get("provenance", {}))


def merged_gram(calib: CalibrationSet, ref: PrunableLayerRef) -> SymMatrix:
    """Prompt Gram + decode Gram; the statistic for decode-aware compression."""
    st = calib.stats.get(ref)
    if st is None:
        raise ValidationError(f"ref {ref} not present in calibration set")
    return SymMatrix(st.gram_prompt.dim, st.gram_prompt.data + st.gram_decode.data)


def prompt_digest(prompt) -> str:
    return hashlib.sha256(bytes(int(t) for t in prompt)).hexdigest()


def load_prompt_file(path) -> list[list[int]]:
    """UTF-8 text, one prompt per line; the line's bytes are the tokens."""
    text = Path(path).read_text(encoding="utf-8")
    prompts = [list(line.encode("utf-8")) for line in text.split("\n") if line]
    if not prompts:
        raise ValidationError(f"{path}: no prompts found")
    return prompts


def _check_prompts(prompts) -> list[list[int]]:
    seqs = [[int(t) for t in p] for p in prompts]
    if not seqs:
        raise ValidationError("prompt list is empty")
    for i, p in enumerate(seqs):
        if not p:
            raise ValidationError(f"prompt {i} is empty")
    return seqs


def _accumulate(dest: CalibrationSet, captures, start: int, stop: int,
                phase: str, limit) -> int:
    """Stream captured columns [start, stop) into the destination Grams.

    Returns how many positions were consumed (identical for every ref).
    """
    take = stop - start
    if limit is not None:
        take = min(take, limit)
    if take <= 0:
        return 0
    for ref, st in dest.stats.items():
        gram = st.gram_prompt if phase == "prompt" else st.gram_decode
        cols = captures[ref]
        for t in range(start, start + take):
            accumulate_gram(gram, cols[t])
        if phase == "prompt":
            st.n_prompt += take
        else:
            st.n_decode += take
    return take


def collect_prompt_phase(model: ModelBundle, prompts, refs,
                         max_columns: int | None = None) -> CalibrationSet:
    """Teacher-force each prompt and accumulate every position into the prompt Gram."""
    seqs = _check_prompts(prompts)
    dest = CalibrationSet.empty(model.config, refs)
    remaining = max_columns
    for prompt in seqs:
        if remaining == 0:
            break
        _, captures = forward_teacher_forced(model, prompt, dest.refs)
        used = _accumulate(dest, captures, 0, len(prompt), "prompt", remaining)
        if remaining is not None:
            remaining -= used
    return dest


def _child_sampler(sampler: Sampler, index: int) -> Sampler:
    if sampler.kind == "greedy":
        return sampler
    child = np.random.SeedSequence(sampler.seed, spawn_key=(index,))
    return replace(sampler, seed=int(child.generate_state(1, np.uint64)[0]))


def collect_decode_phase(model: ModelBundle, prompts, refs, t_max: int,
                         sampler: Sampler = GREEDY,
                         trace_model: ModelBundle | None = None,
                         max_columns: int | None = None) -> CalibrationSet:
    """Roll out each prompt, then teacher-force the full sequence through the
    target model and accumulate the columns at generated positions.

    With ``trace_model`` unset the rollout comes from the target itself
    (on-policy); otherwise the foreign model writes the tokens and the target
    merely re-reads them, so the Grams always hold the target's activations.
    Column counts track generated tokens only.
    """
    seqs = _check_prompts(prompts)
    if t_max < 0:
        raise ValidationError("t_max must be >= 0")
    source = trace_model if trace_model is not None else model
    if source.config.vocab_size != model.config.vocab_size:
        raise ValidationError("trace model vocabulary is incompatible with target")
    dest = CalibrationSet.empty(model.config, refs)
    remaining = max_columns
    for m, prompt in enumerate(seqs):
        if remaining == 0:
            break
        for cfg, who in ((model.config, "target"), (source.config, "trace")):
            if len(prompt) + t_max > cfg.max_positions:
                raise ValidationError(
                    f"prompt {m} + t_max exceeds {who} model max_positions={cfg.max_positions}"
                )
        full = decode(source, prompt, t_max, _child_sampler(sampler, m))
        if len(full) == len(prompt):
            continue
        _, captures = forward_teacher_forced(model, full, dest.refs)
        used = _accumulate(dest, captures, len(prompt), len(full), "decode", remaining)
        if remaining is not None:
            remaining -= used
    return dest


def collect_corpus(model: ModelBundle, text, refs, token_budget: int) -> CalibrationSet:
    """Chunk a byte stream into max_positions-sized sequences and accumulate
    every position until ``token_budget`` columns are consumed.

    A stream shorter than the budget yields what it has and records a warning
    in the returned provenance.
    """
    data = bytes(text)
    if not data:
        raise ValidationError("corpus stream is empty")
    if token_budget <= 0:
        raise ValidationError("token_budget must be positive")
    dest = CalibrationSet.empty(model.config, refs)
    size = model.config.max_positions
    offset = 0
    consumed = 0
    while consumed < token_budget and offset < len(data):
        chunk = data[offset : offset + min(size, token_budget - consumed)]
        offset += len(chunk)
        _, captures = forward_teacher_forced(model, list(chunk), dest.refs)
        consumed += _accumulate(dest, captures, 0, len(chunk), "prompt", None)
    if consumed < token_budget:
        msg = (f"corpus exhausted after {consumed} of {token_budget} requested columns")
        logger.warning(msg)
        dest.provenance.setdefault("warnings", []).append(msg)
    return dest


def collect(model: ModelBundle, config: CalibrationConfig, refs,
            corpus=None) -> CalibrationSet:
    """Run the phases demanded by ``config.mode`` and attach provenance."""
    provenance = {
        "mode": config.mode,
        "model_hash": model_content_hash(model),
        "trace_model_hash": (
            model_content_hash(config.trace_model)
            if config.trace_model is not None else None
        ),
        "t_max": config.t_max,
        "sampler": {
            "kind": config.sampler.kind,
            "temperature": config.sampler.temperature,
            "seed": config.sampler.seed,
        },
        "token_budget": config.token_budget,
        "prompt_hashes": [],
        "warnings": [],
    }
    if config.mode == "corpus":
        if corpus is None:
            raise ValidationError("corpus mode requires a byte stream")
        dest = collect_corpus(model, corpus, refs, config.token_budget or len(bytes(corpus)))
        provenance["warnings"] = dest.provenance.get("warnings", [])
        dest.provenance = provenance
        return dest

    prompts = _check_prompts(config.prompts)
    provenance["prompt_hashes"] = [prompt_digest(p) for p in prompts]
    dest = collect_prompt_phase(model, prompts, refs, max_columns=config.token_budget)
    if config.mode in ("rac", "off_policy"):
        used = dest.stats[dest.refs[0]].n_prompt
        remaining = None if config.token_budget is None else config.token_budget - used
        trace = config.trace_model if config.mode == "off_policy" else None
        dec = collect_decode_phase(model, prompts, refs, config.t_max,
                                   config.sampler, trace_model=trace,
                                   max_columns=remaining)
        dest.add_from(dec)
    dest.provenance = provenance
    return dest
