"""Command-line interface: synth, train, evaluate, compare, explain, predict.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

import torch

from windfuse import synth
from windfuse.artifacts import ArtifactStore
from windfuse.config import RunConfig
from windfuse.errors import DataError, ModelError, UsageError
from windfuse.registry import REGISTRY_NAME, RunRegistry
from windfuse.services import PipelineService
from windfuse.utils import parse_overrides, thread_cap
from windfuse.version import APP_NAME, __version__

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# flag -> dotted config key
FLAG_OVERRIDES = {
    "epochs": "text.epochs",
    "lr": "text.lr",
    "trees": "rf.n_trees",
    "depth": "rf.max_depth",
    "vocab": "text.max_terms",
    "min_df": "text.min_df",
    "max_tokens": "text.max_tokens",
    "folds": "eval.folds",
    "method": "eval.sensitivity_method",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def _add_common(p: argparse.ArgumentParser, needs_data: bool = True):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    if needs_data:
        p.add_argument("--data", required=True, help="station CSV")
    p.add_argument("--set", action="append", default=[], metavar="GROUP.FIELD=VALUE",
                   help="config override; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")


def _add_training(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--trees", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--vocab", type=int, help="TF-IDF term cap")
    p.add_argument("--min-df", type=int)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--rf-tfidf", action="store_true",
                   help="append TF-IDF columns to the forest input")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=APP_NAME, description="Dual-stream wind hazard risk classifier.")
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic station CSV")
    _add_common(p, needs_data=False)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--complementary", action="store_true")
    p.add_argument("--delta-num", type=float, default=2.0)
    p.add_argument("--delta-text", type=float, default=0.8)
    p.add_argument("--pi-high", type=float, default=0.5)

    p = sub.add_parser("train", help="fit the pipeline and report on a held-out split")
    _add_common(p)
    _add_training(p)

    p = sub.add_parser("evaluate", help="stratified k-fold cross-validation")
    _add_common(p)
    _add_training(p)
    p.add_argument("--model", help="bundle (or directory) whose config to cross-validate")
    p.add_argument("--folds", type=int)

    p = sub.add_parser("compare", help="baseline comparison and modality robustness")
    _add_common(p)
    _add_training(p)

    p = sub.add_parser("explain", help="sensitivity and ablation reports")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=("fd", "exact-meta"))

    p = sub.add_parser("predict", help="score a CSV with a trained bundle")
    _add_common(p)
    p.add_argument("--model", required=True)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {}
    for flag, key in FLAG_OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "rf_tfidf", False):
        overrides["rf.use_tfidf"] = True
    overrides.update(parse_overrides(args.set))
    return overrides


def _execute(args: argparse.Namespace, store: ArtifactStore) -> Dict[str, Any]:
    """Runs the command; returns the resolved config and its metrics."""
    overrides = _overrides(args)
    base = RunConfig()
    pipeline = None
    if getattr(args, "model", None):
        pipeline = PipelineService.load_pipeline(args.model, store)
        base = pipeline.config
    config = PipelineService.resolve_config(base, args.seed, overrides)
    logger.info("resolved config: %s", config.to_json())
    store.write_text("config.json", config.to_json() + "\n")

    if args.command == "synth":
        try:
            spec = synth.SynthSpec(
                n=args.n, delta_num=args.delta_num, delta_text=args.delta_text,
                pi_high=args.pi_high, seed=config.seed, complementary=args.complementary,
            )
        except ValueError as e:
            raise UsageError(f"invalid synth spec: {e}") from e
        return {"config": config, "metrics": PipelineService.synth(spec, store)}

    ds = PipelineService.load_dataset(args.data, store)
    if args.command == "train":
        metrics = PipelineService.train(ds, config, store)
    elif args.command == "evaluate":
        if config.eval.folds < 2:
            raise UsageError("folds must be ≥ 2")
        metrics = PipelineService.evaluate(ds, config, config.eval.folds, store)
    elif args.command == "compare":
        metrics = PipelineService.compare(ds, config, store)
    elif args.command == "explain":
        if config != pipeline.config:
            pipeline = replace(pipeline, config=config)
        metrics = PipelineService.explain(pipeline, ds, config.eval.sensitivity_method, store)
    else:
        metrics = PipelineService.predict(pipeline, ds, store)
    return {"config": config, "metrics": metrics}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parses argv, runs one command, returns the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)
    if getattr(args, "folds", None) is not None and args.folds < 2:
        print("folds must be ≥ 2", file=sys.stderr)
        return 1

    configure_logging(args.verbose, args.quiet)
    torch.set_num_threads(thread_cap())
    return _run_command(args)


def _run_command(args: argparse.Namespace) -> int:
    store = ArtifactStore(args.out)
    try:
        store.ensure()
        with RunRegistry(os.path.join(args.out, REGISTRY_NAME)) as registry:
            run_id = registry.start_run(args.command, args.seed, __version__, args.out)
            try:
                result = _execute(args, store)
                config: RunConfig = result["config"]
                metrics: Dict[str, Any] = result["metrics"]
                store.write_manifest(
                    args.command, config.to_json(), config.seed, extra={"metrics": metrics}
                )
                registry.add_metrics(run_id, args.command, metrics)
                registry.finish_run(run_id, "ok", config_json=config.to_json(), seed=config.seed)
                return 0
            except UsageError as e:
                message, code, status = str(e), 1, "usage_error"
            except (DataError, ModelError, OSError) as e:
                message, code, status = f"error: {e}", 2, "failed"
            registry.finish_run(run_id, status, message)
    except OSError as e:
        message, code = f"error: {e}", 2
    print(message, file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None):
    sys.exit(run(argv))
