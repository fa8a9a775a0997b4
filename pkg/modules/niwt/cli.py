from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Callable, Dict, List, Optional

from autodiff.tensor import AutodiffError

from .config import IMPORTANCE_LAYERS, PROBE_MODES, RunConfig, load_config
from .errors import ConfigError, NiwtError, exit_code_for
from .pipeline import NiwtPipeline
from .report import format_table
from .types import GzslResult

logger = logging.getLogger(__name__)

COMMANDS = (
    "gen-data",
    "train-seen",
    "extract-importance",
    "fit-map",
    "transfer",
    "eval-gzsl",
    "explain",
    "sweep-lambda",
    "sweep-noise",
    "sweep-layer",
    "sweep-probes",
    "run-all",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="niwt",
        description="Zero-shot classifier weights from class descriptions via neuron importances.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="TOML or JSON run configuration")
    parser.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    parser.add_argument("--layer", choices=IMPORTANCE_LAYERS, help="layer importances are taken at")
    parser.add_argument("--lambda", dest="lambda_", type=float, help="transfer regularization coefficient")
    parser.add_argument("--probe-mode", choices=PROBE_MODES, help="source of probe images")
    parser.add_argument("--threads", type=int, help="worker cap")
    parser.add_argument("--out", help="run directory")
    parser.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    parser.add_argument("--grid-search", action="store_true",
                        help="transfer: pick lambda, lr and batch size on the validation split first")
    parser.add_argument("--with-reference", action="store_true",
                        help="append the published full-scale rows to summary tables")
    return parser


def cli_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested config overrides for every flag that was given."""
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.log_level is not None:
        overrides["log_level"] = args.log_level
    if args.out is not None:
        overrides.setdefault("paths", {})["out_dir"] = args.out
    transfer = {}
    if args.layer is not None:
        transfer["layer"] = args.layer
    if args.lambda_ is not None:
        transfer["lambda"] = args.lambda_
    if args.probe_mode is not None:
        transfer["probe_mode"] = args.probe_mode
    if transfer:
        overrides["transfer"] = transfer
    return overrides


def _rows_table(rows: List[Dict[str, Any]], key: str) -> str:
    results = [GzslResult(r["acc_u"], r["acc_s"], r["h"], f"{key}={r[key]}") for r in rows]
    return format_table(results)


def _dump(summary: Dict[str, Any]) -> str:
    return json.dumps(summary, indent=2, sort_keys=True, default=str)


def run_command(pipeline: NiwtPipeline, command: str, args: argparse.Namespace) -> str:
    """Run one command and return its human-readable summary."""
    if command == "gen-data":
        manifest = pipeline.generate_data()
        split = manifest.split
        return (f"Generated {len(manifest)} images of {manifest.num_classes} classes; "
                f"{len(split.seen)} seen, {len(split.unseen)} unseen, {len(split.heldout)} held-out")
    if command == "train-seen":
        _, report = pipeline.train_seen()
        accuracy = report.final_accuracy
        return f"Seen training done: final loss {report.epoch_losses[-1]:.4f}" + (
            f", validation accuracy {accuracy:.3f}" if accuracy is not None else "")
    if command == "extract-importance":
        return _dump(pipeline.extract_importance())
    if command == "fit-map":
        return _dump(pipeline.fit_maps())
    if command == "transfer":
        lines = []
        if args.grid_search:
            best = pipeline.grid_search()["best"]
            lines.append(f"Grid search: lambda={best['lambda']:g} lr={best['lr']:g} batch={best['batch_size']} "
                         f"(validation H {100 * best['h']:.1f})")
        result = pipeline.transfer()
        for class_id in sorted(result.rows):
            lines.append(f"class {class_id}: best loss {result.best_losses[class_id]:.4f} "
                         f"after {result.iterations[class_id]} iterations")
        return "\n".join(lines)
    if command == "eval-gzsl":
        _, table = pipeline.eval_gzsl(args.with_reference)
        return table
    if command == "explain":
        return _dump(pipeline.explain())
    if command == "sweep-lambda":
        return _rows_table(pipeline.sweep_lambda(), "lambda")
    if command == "sweep-noise":
        rows = pipeline.sweep_noise()
        return "\n".join(f"epsilon={r['epsilon']:g}: accuracy {100 * r['accuracy']:.1f} "
                         f"(original {100 * r['original_accuracy']:.1f}, chance {100 * r['chance']:.1f})" for r in rows)
    if command == "sweep-layer":
        return _rows_table(pipeline.sweep_layer(), "layer")
    if command == "sweep-probes":
        return _rows_table(pipeline.sweep_probes(), "probe_mode")
    if command == "run-all":
        _, table = pipeline.run_all(args.with_reference)
        return table
    raise ConfigError(f"unknown command {command!r}")


def main(argv: Optional[List[str]] = None, make_pipeline: Callable[[RunConfig], NiwtPipeline] = NiwtPipeline) -> int:
    """
    Entry point; returns the process exit code.

    Exit codes: 0 success, 2 configuration error, 3 missing prerequisite
    artifact, 4 numerical failure.
    """
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, cli_overrides(args))
        logging.basicConfig(level=getattr(logging, config.log_level.upper(), logging.INFO),
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        pipeline = make_pipeline(config)
        summary = run_command(pipeline, args.command, args)
        pipeline.write_meta(args.command)
    except (NiwtError, AutodiffError) as exc:
        print(f"niwt {args.command}: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
