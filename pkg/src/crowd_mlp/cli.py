"""Command-line entry point for synthesis, training, evaluation and numerical checks."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from pydantic import ValidationError

from crowd_mlp.data.manifest import ImageLoadError, ManifestError, load_manifest
from crowd_mlp.data.synth import SynthConfig, export_synthetic, generate_scenes
from crowd_mlp.data.transforms import UnsupportedOperationError
from crowd_mlp.engine.gradcheck import check_primitives
from crowd_mlp.engine.rng import RngState
from crowd_mlp.engine.tensor import ContractError, DimensionError, ParameterError
from crowd_mlp.evaluation import evaluate_records, export_embeddings
from crowd_mlp.log import logger, set_verbose
from crowd_mlp.model.config import STREAMS, ConfigurationError, describe_validation_error
from crowd_mlp.model.crowdmlp import build_model
from crowd_mlp.settings import (
    PROFILES,
    load_train_config,
    make_train_config,
    save_train_config,
    validate_train_config,
)
from crowd_mlp.split_counting import (
    draw_ensemble_samples,
    ensemble_corollary,
    gradcheck_split_counting,
    verify_decomposition,
)
from crowd_mlp.training.checkpoint import CheckpointError, load_model
from crowd_mlp.training.config import TrainConfig
from crowd_mlp.training.trainer import train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdmlp",
        description="Weakly-supervised crowd counting with a multi-granularity MLP.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log debug details.")
    subparsers = parser.add_subparsers(dest="command")

    synth_parser = subparsers.add_parser("synth", help="Write synthetic scenes and a manifest.")
    synth_parser.add_argument("--out", required=True, help="Output directory.")
    synth_parser.add_argument("--count", type=int, default=20, help="Number of scenes.")
    synth_parser.add_argument("--height", type=int, default=128, help="Scene height in pixels.")
    synth_parser.add_argument("--width", type=int, default=128, help="Scene width in pixels.")
    synth_parser.add_argument("--n-min", type=int, default=20, help="Fewest objects per scene.")
    synth_parser.add_argument("--n-max", type=int, default=80, help="Most objects per scene.")
    synth_parser.add_argument("--seed", type=int, default=0, help="Generator seed.")

    train_parser = subparsers.add_parser("train", help="Train with the Split-Counting objective.")
    _add_train_arguments(train_parser)
    train_parser.add_argument("--save-config", help="Also write the resolved config as JSON.")

    eval_parser = subparsers.add_parser("eval", help="Sliding-window MAE/MSE over a manifest.")
    _add_inference_arguments(eval_parser)
    eval_parser.add_argument("--table", action="store_true", help="Print an aligned table.")

    grad_parser = subparsers.add_parser(
        "gradcheck", help="Compare analytic gradients with central finite differences."
    )
    grad_parser.add_argument("--profile", choices=sorted(PROFILES), default="tiny")
    grad_parser.add_argument("--tolerance", type=float, default=1e-4)
    grad_parser.add_argument("--coords", type=int, default=4, help="Coordinates per tensor.")
    grad_parser.add_argument("--seed", type=int, default=0)

    identity_parser = subparsers.add_parser(
        "verify-identity", help="Check the ensemble error decomposition on random triples."
    )
    identity_parser.add_argument("--samples", type=int, default=100_000)
    identity_parser.add_argument("--tolerance", type=float, default=1e-6)
    identity_parser.add_argument("--seed", type=int, default=0)

    ablate_parser = subparsers.add_parser(
        "ablate", help="Train the stream-removal and proxy on/off grid."
    )
    _add_train_arguments(ablate_parser)
    ablate_parser.add_argument("--table", action="store_true", help="Print an aligned table.")

    export_parser = subparsers.add_parser(
        "export-embeddings", help="Write pooled token embeddings per image as CSV."
    )
    _add_inference_arguments(export_parser)
    export_parser.add_argument("--out", required=True, help="CSV output path.")

    return parser


def _add_train_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    parser.add_argument("--config", help="JSON training config; flags override it.")
    parser.add_argument("--out", help="Run directory.")
    parser.add_argument("--manifest", help="Train on a manifest instead of synthetic scenes.")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--max-steps", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--num-scenes", type=int)
    parser.add_argument("--clip-norm", type=float)
    parser.add_argument("--raw-drop-schedule", choices=["per_pass", "per_epoch"])
    parser.add_argument(
        "--disable-stream",
        action="append",
        choices=list(STREAMS),
        default=[],
        help="Remove a token stream (repeatable).",
    )
    parser.add_argument("--no-proxy", action="store_true", help="Train on L_C only.")
    parser.add_argument("--no-augment", action="store_true", help="Skip flips and lighting.")


def _add_inference_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", required=True, help="Manifest CSV (image,count).")
    parser.add_argument("--checkpoint", required=True, help="Checkpoint file.")
    parser.add_argument("--window", type=int, help="Window size; defaults to the model input.")
    parser.add_argument(
        "--resize",
        help="LONGxSHORT resize policy, e.g. 1024x768. Default keeps native resolution.",
    )


def main(argv: Sequence[str] | None = None) -> int:
    raw_args = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(raw_args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    set_verbose(args.verbose)

    try:
        return run_cli(args)
    except (ConfigurationError, ParameterError, DimensionError) as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
    except (ManifestError, ImageLoadError, CheckpointError, UnsupportedOperationError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
    except ContractError as exc:
        print(f"Internal contract violated: {exc}", file=sys.stderr)
    return EXIT_USAGE


def run_cli(args: argparse.Namespace) -> int:
    if args.command == "synth":
        return _run_synth(args)
    if args.command == "train":
        return _run_train(args)
    if args.command == "eval":
        return _run_eval(args)
    if args.command == "gradcheck":
        return _run_gradcheck(args)
    if args.command == "verify-identity":
        return _run_verify_identity(args)
    if args.command == "ablate":
        return _run_ablate(args)
    if args.command == "export-embeddings":
        return _run_export_embeddings(args)
    raise AssertionError(f"Unsupported command: {args.command}")


def _run_synth(args: argparse.Namespace) -> int:
    try:
        cfg = SynthConfig(
            height=args.height,
            width=args.width,
            n_min=args.n_min,
            n_max=args.n_max,
            seed=args.seed,
        )
    except ValidationError as exc:
        raise ConfigurationError(describe_validation_error(exc)) from exc
    if args.count < 0:
        raise ConfigurationError("--count must be nonnegative")
    manifest = export_synthetic(args.out, cfg, args.count)
    _emit({"manifest": str(manifest), "scenes": args.count})
    return EXIT_OK


def _run_train(args: argparse.Namespace) -> int:
    cfg = _resolve_train_config(args)
    if args.save_config:
        save_train_config(cfg, args.save_config)
    result = train(cfg)
    last = result.history[-1]
    _emit(
        {
            "best_checkpoint": str(result.best_checkpoint),
            "final_checkpoint": str(result.final_checkpoint),
            "log": str(result.log_path),
            "steps": result.steps,
            "epochs": len(result.history),
            "first_L_C": result.first_step.L_C if result.first_step else None,
            "final_L_C": last.loss.L_C,
            "best_val_mae": result.best_val_mae,
        }
    )
    return EXIT_OK


def _run_eval(args: argparse.Namespace) -> int:
    model, _ = load_model(args.checkpoint)
    records = load_manifest(args.manifest)
    if not records:
        raise ConfigurationError(f"Manifest {args.manifest} lists no images")
    report = evaluate_records(
        records,
        model,
        window=args.window or model.config.image_size,
        resize=_parse_resize(args.resize),
    )
    print(report.table() if args.table else report.to_json())
    return EXIT_OK


def _run_gradcheck(args: argparse.Namespace) -> int:
    rng = RngState(args.seed)
    primitives = check_primitives(rng.derive("primitives"))

    cfg = make_train_config(args.profile)
    model = build_model(cfg.run_model_config(), seed=args.seed)
    size = cfg.crop_size
    synth = cfg.synth.model_copy(update={"height": size, "width": size})
    scenes = generate_scenes(synth, 2)
    images = np.stack([s.image for s in scenes])
    counts = np.array([s.count for s in scenes])
    per_param = gradcheck_split_counting(
        model, images, counts, rng.derive("model"), coords_per_param=args.coords
    )

    worst_primitive = max(primitives.values())
    worst_param = max(per_param, key=per_param.__getitem__)
    worst = max(worst_primitive, per_param[worst_param])
    passed = worst < args.tolerance
    _emit(
        {
            "profile": args.profile,
            "passed": passed,
            "max_relative_error": worst,
            "max_primitive_error": worst_primitive,
            "max_parameter_error": per_param[worst_param],
            "worst_parameter": worst_param,
            "parameters_checked": len(per_param),
            "tolerance": args.tolerance,
        }
    )
    if not passed:
        errors = {**primitives, **per_param}
        failing = sorted(name for name, err in errors.items() if err >= args.tolerance)
        logger.warning("Gradient check above tolerance for: %s", ", ".join(failing))
    return EXIT_OK if passed else EXIT_VALIDATION


def _run_verify_identity(args: argparse.Namespace) -> int:
    if args.samples < 1:
        raise ConfigurationError("--samples must be at least 1")
    samples = draw_ensemble_samples(RngState(args.seed), args.samples)
    residual = verify_decomposition(samples)
    fraction = ensemble_corollary(samples)
    passed = residual < args.tolerance and fraction == 1.0
    _emit(
        {
            "samples": args.samples,
            "max_residual": residual,
            "corollary_fraction": fraction,
            "tolerance": args.tolerance,
            "passed": passed,
        }
    )
    return EXIT_OK if passed else EXIT_VALIDATION


ABLATIONS: tuple[tuple[str, dict[str, Any]], ...] = (
    ("baseline", {}),
    ("w/o raw", {"disabled_streams": ["raw"]}),
    ("w/o 16x16", {"disabled_streams": ["feat16"]}),
    ("w/o 8x8", {"disabled_streams": ["feat8"]}),
    ("w/o 4x4", {"disabled_streams": ["feat4"]}),
    ("proxy off", {"use_proxy": False}),
)


def _run_ablate(args: argparse.Namespace) -> int:
    base = _resolve_train_config(args)
    rows = []
    for label, change in ABLATIONS:
        slug = label.replace("/", "").replace(" ", "_")
        values = base.model_dump()
        values.update(change)
        values["out_dir"] = str(Path(base.out_dir) / slug)
        cfg = validate_train_config(values)
        result = train(cfg)
        assert result.model is not None
        row = {
            "config": label,
            "parameters": result.model.parameter_count(),
            "steps": result.steps,
            "final_L_C": result.history[-1].loss.L_C,
            "val_mae": result.best_val_mae,
        }
        rows.append(row)
        if not args.table:
            _emit(row)
    if args.table:
        print(_format_table(rows))
    return EXIT_OK


def _run_export_embeddings(args: argparse.Namespace) -> int:
    model, _ = load_model(args.checkpoint)
    records = load_manifest(args.manifest)
    path = export_embeddings(
        records,
        model,
        args.out,
        window=args.window or model.config.image_size,
        resize=_parse_resize(args.resize),
    )
    _emit({"embeddings": str(path), "images": len(records), "dim": model.config.token_dim})
    return EXIT_OK


def _resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    base = load_train_config(args.config) if args.config else make_train_config(args.profile)
    values = base.model_dump()
    flags = {
        "out_dir": args.out,
        "manifest": args.manifest,
        "epochs": args.epochs,
        "max_steps": args.max_steps,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "num_scenes": args.num_scenes,
        "clip_norm": args.clip_norm,
        "raw_drop_schedule": args.raw_drop_schedule,
    }
    values.update({key: value for key, value in flags.items() if value is not None})
    if args.disable_stream:
        values["disabled_streams"] = [*values["disabled_streams"], *args.disable_stream]
    if args.no_proxy:
        values["use_proxy"] = False
    if args.no_augment:
        values["augment"] = False
    return validate_train_config(values)


def _parse_resize(value: str | None) -> tuple[int, int] | None:
    if not value:
        return None
    try:
        long_side, short_side = (int(part) for part in value.lower().split("x"))
    except ValueError as exc:
        raise ConfigurationError(f"--resize expects LONGxSHORT, got {value!r}") from exc
    if long_side < short_side or short_side < 1:
        raise ConfigurationError(f"--resize needs LONG >= SHORT >= 1, got {value!r}")
    return long_side, short_side


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload))


def _format_table(rows: list[dict[str, Any]]) -> str:
    headers = list(rows[0])
    cells = [[_format_cell(row[h]) for h in headers] for row in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _format_cell(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


if __name__ == "__main__":
    raise SystemExit(main())
