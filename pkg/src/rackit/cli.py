"""Command-line pipeline.

Subcommands: ``gen-model``, ``calibrate``, ``prune``, ``diagnose``, ``eval``.
Exit codes: 0 success, 1 validation problem, 2 numerical failure, 3 I/O or
container problem.

Every command takes a single ``--seed``; internal streams derive from it with
fixed offsets (the model generator uses the seed itself, decode sampling uses
seed + 1). Given identical flags and seeds a command overwrites its outputs
with byte-identical artifacts; wall-clock data goes to a ``<output>.log``
sidecar, never into artifact bodies. An optional ``--config <json>`` supplies
defaults for any flag, with explicit flags taking precedence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from .calibration import (
    CalibrationConfig,
    CalibrationSet,
    collect,
    load_prompt_file,
)
from .compress import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_DAMP_FRACTION,
    SparsityPattern,
    compress_model,
)
from .diagnostics import (
    DiagnosticTrace,
    error_trace,
    eval_nll,
    ratio_map,
    summarize_phase_errors,
    write_errors_csv,
    write_ratios_csv,
    write_summary_json,
)
from .errors import ContainerError, NumericalError, ValidationError
from .model import (
    GREEDY,
    ModelConfig,
    PrunableLayerRef,
    Sampler,
    SLOTS,
    decode,
    generate_model,
    load_model,
    model_content_hash,
    save_model,
    sort_refs,
)

__all__ = ["main"]

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

THREADS_ENV_VAR = "RAC_THREADS"

# Fixed per-phase offsets applied to --seed.
_MODEL_SEED_OFFSET = 0
_DECODE_SEED_OFFSET = 1

_REQUIRED = object()


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; remap to the validation exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_VALIDATION)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_sidecar(target, payload: dict) -> None:
    Path(str(target) + ".log").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _merge_config(args, parser, defaults: dict) -> None:
    """Fill unset flags from --config, then from built-in defaults."""
    cfg = {}
    if args.config is not None:
        raw = Path(args.config).read_text()
        try:
            cfg = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"--config {args.config}: bad JSON ({exc})") from exc
        if not isinstance(cfg, dict):
            raise ValidationError(f"--config {args.config}: expected a JSON object")
        unknown = sorted(set(cfg) - set(defaults))
        if unknown:
            raise ValidationError(
                f"--config {args.config}: unknown keys {unknown}; "
                f"allowed: {sorted(defaults)}"
            )
    for key, default in defaults.items():
        if getattr(args, key) is None:
            value = cfg.get(key, default)
            if value is _REQUIRED:
                parser.error(f"the following argument is required: --{key.replace('_', '-')}")
            setattr(args, key, value)


def _resolve_threads(value) -> int:
    if value is None:
        env = os.environ.get(THREADS_ENV_VAR)
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ValidationError(
                f"{THREADS_ENV_VAR}={env!r} is not an integer"
            ) from None
    if value < 1:
        raise ValidationError(f"threads must be >= 1, got {value}")
    return int(value)


def _parse_layers(spec, n_layers: int) -> list[int]:
    if spec is None or spec == "all":
        return list(range(n_layers))
    try:
        layers = [int(part) for part in str(spec).split(",") if part != ""]
    except ValueError:
        raise ValidationError(f"bad --layers value {spec!r}") from None
    if not layers:
        raise ValidationError("--layers selected nothing")
    for layer in layers:
        if not 0 <= layer < n_layers:
            raise ValidationError(f"layer {layer} out of range [0, {n_layers})")
    return sorted(set(layers))


def _parse_slots(spec) -> list[str]:
    if spec is None or spec == "all":
        return list(SLOTS)
    slots = [part for part in str(spec).split(",") if part != ""]
    if not slots:
        raise ValidationError("--slots selected nothing")
    for slot in slots:
        if slot not in SLOTS:
            raise ValidationError(f"unknown slot {slot!r}, expected one of {SLOTS}")
    return slots


def _refs_from_flags(layers_spec, slots_spec, n_layers: int):
    layers = _parse_layers(layers_spec, n_layers)
    slots = _parse_slots(slots_spec)
    return sort_refs(PrunableLayerRef(i, s) for i in layers for s in slots)


def _check_input_files(*paths) -> None:
    for path in paths:
        if path is not None and not Path(path).is_file():
            raise FileNotFoundError(f"input file not found: {path}")


# ---------------------------------------------------------------------------
# gen-model

_GEN_DEFAULTS = {
    "d_model": _REQUIRED,
    "layers": _REQUIRED,
    "heads": _REQUIRED,
    "d_mlp": None,
    "max_positions": 256,
    "ln_eps": 1e-5,
    "seed": 0,
    "out": _REQUIRED,
}


def _cmd_gen_model(args, parser) -> int:
    started = _utc_now()
    t0 = time.perf_counter()
    _merge_config(args, parser, _GEN_DEFAULTS)
    d_mlp = args.d_mlp if args.d_mlp is not None else 4 * args.d_model
    config = ModelConfig(
        d_model=args.d_model,
        n_layers=args.layers,
        n_heads=args.heads,
        d_mlp=d_mlp,
        max_positions=args.max_positions,
        layernorm_epsilon=args.ln_eps,
    )
    bundle = generate_model(config, args.seed + _MODEL_SEED_OFFSET)
    save_model(bundle, args.out)
    digest = model_content_hash(bundle)
    print(json.dumps({"model": str(args.out), "hash": digest,
                      "config": {"d_model": config.d_model,
                                 "n_layers": config.n_layers,
                                 "n_heads": config.n_heads,
                                 "d_mlp": config.d_mlp,
                                 "max_positions": config.max_positions},
                      "seed": args.seed}))
    _write_sidecar(args.out, {
        "command": "gen-model",
        "started_utc": started,
        "finished_utc": _utc_now(),
        "duration_s": time.perf_counter() - t0,
        "model_hash": digest,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate

_CAL_DEFAULTS = {
    "model": _REQUIRED,
    "mode": _REQUIRED,
    "prompts": None,
    "corpus": None,
    "t_max": 0,
    "sampler": "greedy",
    "temperature": 1.0,
    "seed": 0,
    "trace_model": None,
    "token_budget": None,
    "layers": None,
    "slots": None,
    "out": _REQUIRED,
}


def _cmd_calibrate(args, parser) -> int:
    started = _utc_now()
    t0 = time.perf_counter()
    _merge_config(args, parser, _CAL_DEFAULTS)
    mode = str(args.mode).replace("-", "_")
    _check_input_files(args.model, args.prompts, args.corpus, args.trace_model)
    model = load_model(args.model)
    refs = _refs_from_flags(args.layers, args.slots, model.config.n_layers)

    trace_model = load_model(args.trace_model) if args.trace_model else None
    sampler = Sampler(kind=args.sampler, temperature=args.temperature,
                      seed=args.seed + _DECODE_SEED_OFFSET)
    prompts: tuple = ()
    corpus = None
    if mode == "corpus":
        if args.corpus is None:
            raise ValidationError("--mode corpus requires --corpus")
        if args.token_budget is None:
            raise ValidationError("--mode corpus requires --token-budget")
        corpus = Path(args.corpus).read_bytes()
    else:
        if args.prompts is None:
            raise ValidationError(f"--mode {args.mode} requires --prompts")
        prompts = tuple(tuple(p) for p in load_prompt_file(args.prompts))
    config = CalibrationConfig(
        mode=mode,
        prompts=prompts,
        t_max=args.t_max,
        sampler=sampler,
        trace_model=trace_model,
        token_budget=args.token_budget,
    )
    calib = collect(model, config, refs, corpus=corpus)
    calib.provenance["seed"] = args.seed
    calib.save(args.out)
    first = calib.stats[calib.refs[0]]
    print(json.dumps({"calibration": str(args.out), "mode": mode,
                      "refs": len(calib.refs),
                      "n_prompt": first.n_prompt, "n_decode": first.n_decode,
                      "digest": calib.content_digest()}))
    _write_sidecar(args.out, {
        "command": "calibrate",
        "started_utc": started,
        "finished_utc": _utc_now(),
        "duration_s": time.perf_counter() - t0,
        "digest": calib.content_digest(),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# prune

_PRUNE_DEFAULTS = {
    "model": _REQUIRED,
    "calib": _REQUIRED,
    "method": _REQUIRED,
    "sparsity": None,
    "nm": None,
    "bits": None,
    "group_size": None,
    "block_size": DEFAULT_BLOCK_SIZE,
    "damp": DEFAULT_DAMP_FRACTION,
    "calib_mode": None,
    "layers": None,
    "slots": None,
    "out": _REQUIRED,
    "report": None,
    "threads": None,
    "seed": 0,
}


def _pattern_from_flags(args) -> SparsityPattern:
    chosen = [name for name, value in
              (("--sparsity", args.sparsity), ("--nm", args.nm), ("--bits", args.bits))
              if value is not None]
    if len(chosen) != 1:
        raise ValidationError(
            f"exactly one of --sparsity, --nm, --bits must be given (got {chosen or 'none'})"
        )
    if args.sparsity is not None:
        return SparsityPattern.unstructured(args.sparsity)
    if args.nm is not None:
        n, sep, m = str(args.nm).partition(":")
        if not sep:
            raise ValidationError(f"--nm expects 'n:m', got {args.nm!r}")
        try:
            return SparsityPattern.semi_structured(int(n), int(m))
        except ValueError:
            raise ValidationError(f"--nm expects integers 'n:m', got {args.nm!r}") from None
    return SparsityPattern.quantize(args.bits, group_size=args.group_size)


def _cmd_prune(args, parser) -> int:
    started = _utc_now()
    t0 = time.perf_counter()
    _merge_config(args, parser, _PRUNE_DEFAULTS)
    _check_input_files(args.model, args.calib)
    threads = _resolve_threads(args.threads)
    pattern = _pattern_from_flags(args)
    model = load_model(args.model)
    calib = CalibrationSet.load(args.calib)

    model_hash = model_content_hash(model)
    recorded = calib.provenance.get("model_hash")
    if recorded is not None and recorded != model_hash:
        raise ValidationError(
            "calibration set was collected on a different model "
            f"(calibration {recorded[:12]}.., model {model_hash[:12]}..)"
        )
    mode = args.calib_mode
    if mode is None:
        mode = calib.provenance.get("mode", "prompt_only")
        if mode == "off_policy":
            mode = "rac"
    mode = str(mode).replace("-", "_")

    if args.layers is None and args.slots is None:
        refs = calib.refs
    else:
        refs = _refs_from_flags(args.layers, args.slots, model.config.n_layers)

    bundle, report = compress_model(
        model, calib, mode, args.method, pattern, refs=refs,
        block_size=args.block_size, damp_fraction=args.damp, threads=threads,
    )
    bundle = replace(bundle, provenance={
        **model.provenance,
        "compressed": {
            "method": report.method,
            "pattern": report.pattern,
            "calibration_mode": mode,
            "calibration_digest": calib.content_digest(),
            "seed": args.seed,
        },
    })
    save_model(bundle, args.out)

    report_path = args.report if args.report is not None else f"{args.out}.report.json"
    body = report.as_dict()
    body["seed"] = args.seed
    Path(report_path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")

    total_loss = sum(r.loss for r in report.refs)
    print(json.dumps({"model": str(args.out), "report": str(report_path),
                      "method": report.method, "mode": mode,
                      "refs": len(report.refs), "total_loss": total_loss,
                      "input_model_hash": report.input_model_hash,
                      "output_model_hash": report.output_model_hash}))
    _write_sidecar(args.out, {
        "command": "prune",
        "started_utc": started,
        "finished_utc": _utc_now(),
        "duration_s": time.perf_counter() - t0,
        "threads": threads,
        "per_ref_seconds": report.timings(),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose

_DIAG_DEFAULTS = {
    "dense": _REQUIRED,
    "compressed": _REQUIRED,
    "prompts": _REQUIRED,
    "t_max": 128,
    "out_dir": _REQUIRED,
    "seed": 0,
}


def _parse_labeled_models(specs) -> list[tuple[str, str]]:
    if isinstance(specs, str):
        specs = [specs]
    pairs = []
    for spec in specs:
        label, sep, path = str(spec).partition("=")
        if not sep:
            label, path = Path(spec).stem, spec
        if not label:
            raise ValidationError(f"empty label in --compressed {spec!r}")
        pairs.append((label, path))
    labels = [label for label, _ in pairs]
    if len(set(labels)) != len(labels):
        raise ValidationError(f"duplicate labels in --compressed: {labels}")
    return pairs


def _cmd_diagnose(args, parser) -> int:
    started = _utc_now()
    t0 = time.perf_counter()
    _merge_config(args, parser, _DIAG_DEFAULTS)
    pairs = _parse_labeled_models(args.compressed)
    if not 1 <= len(pairs) <= 2:
        raise ValidationError(
            f"--compressed takes one or two models, got {len(pairs)}"
        )
    _check_input_files(args.dense, args.prompts, *(path for _, path in pairs))
    dense = load_model(args.dense)
    compressed = [(label, load_model(path)) for label, path in pairs]
    prompts = load_prompt_file(args.prompts)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    traces = []
    for idx, prompt in enumerate(prompts):
        rollout = decode(dense, prompt, args.t_max, GREEDY)
        errors = {
            label: error_trace(dense, bundle, rollout, len(prompt))
            for label, bundle in compressed
        }
        traces.append(DiagnosticTrace(
            problem_id=f"p{idx}",
            boundary=len(prompt),
            length=len(rollout),
            errors=errors,
        ))

    write_errors_csv(out_dir / "errors.csv", traces)
    summary = summarize_phase_errors(traces)
    extra = {
        "dense_model_hash": model_content_hash(dense),
        "compressed_models": {label: model_content_hash(bundle)
                              for label, bundle in compressed},
        "t_max": args.t_max,
        "problems": len(traces),
        "seed": args.seed,
    }
    if len(compressed) == 2:
        first, second = compressed[0][0], compressed[1][0]
        ratios = ratio_map([t.errors[first] for t in traces],
                           [t.errors[second] for t in traces])
        write_ratios_csv(out_dir / "ratios.csv",
                         [t.problem_id for t in traces], ratios)
        extra["ratio"] = {"numerator": first, "denominator": second}
    write_summary_json(out_dir / "summary.json", summary, extra)

    print(json.dumps({"out_dir": str(out_dir), "problems": len(traces),
                      "phase_means": summary}))
    _write_sidecar(out_dir / "run", {
        "command": "diagnose",
        "started_utc": started,
        "finished_utc": _utc_now(),
        "duration_s": time.perf_counter() - t0,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

_EVAL_DEFAULTS = {
    "model": _REQUIRED,
    "text": _REQUIRED,
    "budget": 4096,
    "out": None,
    "seed": 0,
}


def _cmd_eval(args, parser) -> int:
    started = _utc_now()
    t0 = time.perf_counter()
    _merge_config(args, parser, _EVAL_DEFAULTS)
    _check_input_files(args.model, args.text)
    model = load_model(args.model)
    result = eval_nll(model, Path(args.text).read_bytes(), args.budget)
    body = {"mean_nll": result.mean_nll, "tokens": result.tokens,
            "budget": args.budget, "model_hash": model_content_hash(model),
            "seed": args.seed}
    print(json.dumps(body))
    if args.out is not None:
        Path(args.out).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        _write_sidecar(args.out, {
            "command": "eval",
            "started_utc": started,
            "finished_utc": _utc_now(),
            "duration_s": time.perf_counter() - t0,
        })
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="rackit", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-model", help="generate a seeded random model")
    gen.add_argument("--d-model", dest="d_model", type=int)
    gen.add_argument("--layers", type=int)
    gen.add_argument("--heads", type=int)
    gen.add_argument("--d-mlp", dest="d_mlp", type=int)
    gen.add_argument("--max-positions", dest="max_positions", type=int)
    gen.add_argument("--ln-eps", dest="ln_eps", type=float)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out")
    gen.add_argument("--config")
    gen.set_defaults(handler=_cmd_gen_model)

    cal = sub.add_parser("calibrate", help="collect per-layer Gram statistics")
    cal.add_argument("--model")
    cal.add_argument("--mode", choices=["corpus", "prompt-only", "rac", "off-policy"])
    cal.add_argument("--prompts")
    cal.add_argument("--corpus")
    cal.add_argument("--t-max", dest="t_max", type=int)
    cal.add_argument("--sampler", choices=["greedy", "temperature"])
    cal.add_argument("--temperature", type=float)
    cal.add_argument("--seed", type=int)
    cal.add_argument("--trace-model", dest="trace_model")
    cal.add_argument("--token-budget", dest="token_budget", type=int)
    cal.add_argument("--layers")
    cal.add_argument("--slots")
    cal.add_argument("--out")
    cal.add_argument("--config")
    cal.set_defaults(handler=_cmd_calibrate)

    prn = sub.add_parser("prune", help="compress a model against calibration data")
    prn.add_argument("--model")
    prn.add_argument("--calib")
    prn.add_argument("--method", choices=["magnitude", "wanda", "obs", "obs-quant"])
    prn.add_argument("--sparsity", type=float)
    prn.add_argument("--nm")
    prn.add_argument("--bits", type=int)
    prn.add_argument("--group-size", dest="group_size", type=int)
    prn.add_argument("--block-size", dest="block_size", type=int)
    prn.add_argument("--damp", type=float)
    prn.add_argument("--calib-mode", dest="calib_mode",
                     choices=["prompt-only", "rac", "corpus"])
    prn.add_argument("--layers")
    prn.add_argument("--slots")
    prn.add_argument("--out")
    prn.add_argument("--report")
    prn.add_argument("--threads", type=int)
    prn.add_argument("--seed", type=int)
    prn.add_argument("--config")
    prn.set_defaults(handler=_cmd_prune)

    dia = sub.add_parser("diagnose", help="tokenwise error traces on held-out rollouts")
    dia.add_argument("--dense")
    dia.add_argument("--compressed", action="append",
                     help="label=path; repeat for a second model")
    dia.add_argument("--prompts")
    dia.add_argument("--t-max", dest="t_max", type=int)
    dia.add_argument("--out-dir", dest="out_dir")
    dia.add_argument("--seed", type=int)
    dia.add_argument("--config")
    dia.set_defaults(handler=_cmd_diagnose)

    ev = sub.add_parser("eval", help="teacher-forced NLL over a byte stream")
    ev.add_argument("--model")
    ev.add_argument("--text")
    ev.add_argument("--budget", type=int)
    ev.add_argument("--out")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--config")
    ev.set_defaults(handler=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args, parser)
    except ValidationError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    except NumericalError as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERICAL
    except (ContainerError, OSError) as exc:
        sys.stderr.write(f"i/o failure: {exc}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
