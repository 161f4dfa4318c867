"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data-file error,
4 numerical failure.  Errors print a single machine-parseable line
``error: <category>: <message>`` on stderr.

``TASTEKIT_THREADS`` caps the linear-algebra thread pools; it must be set
before the interpreter first imports numpy, which this module guarantees
for the console-script entry point.
"""

from __future__ import annotations

import os

_threads = os.environ.get("TASTEKIT_THREADS")
if _threads and _threads.isdigit():
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys

from .errors import ConfigError, DataFormatError, NumericalError

_EPILOG = """\
conventions:
  quantiles    level-q quantile of n samples = ascending-sorted value at
               index ceil(q*n) - 1 (0-based); thresholds use level 1 - alpha
  decisions    a point is flagged when its score strictly exceeds the
               threshold
  routes       exact | shortcut | hutchinson:K | omit   (omit drops the
               Laplacian term and is never applied implicitly)
environment:
  TASTEKIT_THREADS   cap for linear-algebra thread pools
"""


def _add_common(sub, *, samples_default=None):
    sub.add_argument("--config", metavar="PATH", help="JSON config file")
    sub.add_argument("--seed", type=int, default=None, metavar="N")
    sub.add_argument("--out", default=None, metavar="DIR", help="output directory")
    sub.add_argument("--samples", type=int, default=samples_default, metavar="N")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tastekit",
        description="Task-aware distribution-shift diagnostics for a fixed predictor.",
        epilog=_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    subs = parser.add_subparsers(dest="command", required=True)

    tp = subs.add_parser("train-predictor", help="train a predictor preset",
                         epilog=_EPILOG,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    tp.add_argument("--preset", default="linear-task-2d")
    _add_common(tp)

    ts = subs.add_parser("train-score", help="train a score-model preset",
                         epilog=_EPILOG,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    ts.add_argument("--preset", default="dsm-gauss2d")
    ts.add_argument("--noise-std", type=float, default=None, metavar="F")
    _add_common(ts)

    sc = subs.add_parser("score", help="score a test CSV with checkpoints",
                         epilog=_EPILOG,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    sc.add_argument("--test", required=True, metavar="PATH")
    sc.add_argument("--calibration", metavar="PATH")
    sc.add_argument("--predictor", required=True, metavar="PATH")
    sc.add_argument("--score", required=True, metavar="PATH")
    sc.add_argument("--route", default=None, metavar="R")
    sc.add_argument("--alpha", type=float, default=None, metavar="F",
                    help="also calibrate a detection threshold at this level")
    sc.add_argument("--per-dimension", action="store_true")
    sc.add_argument("--no-baseline", action="store_true")
    _add_common(sc)

    ex = subs.add_parser("experiment", help="run an experiment preset",
                         epilog=_EPILOG,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    ex.add_argument("--kind", default=None,
                    choices=["rotate", "tilt", "mixed", "blindspot", "identities"])
    ex.add_argument("--alpha", type=float, default=None, metavar="F")
    ex.add_argument("--route", default=None, metavar="R")
    ex.add_argument("--per-dimension", action="store_true")
    ex.add_argument("--no-baseline", action="store_true")
    ex.add_argument("--predictor", default=None, metavar="SPEC",
                    help="exact | trained | checkpoint path")
    ex.add_argument("--score-model", default=None, metavar="SPEC",
                    help="exact | checkpoint path")
    _add_common(ex)
    return parser


def _load_config_file(path) -> dict:
    from .reportio import read_json

    payload = read_json(path)
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return payload


def _cmd_experiment(args) -> dict:
    from .experiments import ExperimentConfig, run_experiment

    payload = _load_config_file(args.config) if args.config else {}
    overrides = {
        "kind": args.kind, "seed": args.seed, "samples": args.samples,
        "alpha": args.alpha, "route": args.route, "out_dir": args.out,
        "predictor": args.predictor, "score": args.score_model,
    }
    for key, value in overrides.items():
        if value is not None:
            payload[key] = value
    if args.per_dimension:
        payload["per_dimension"] = True
    if args.no_baseline:
        payload["baseline"] = False
    payload.setdefault("seed", 0)
    payload.setdefault("out_dir", "out")
    try:
        cfg = ExperimentConfig.from_dict(payload)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return run_experiment(cfg)


def _cmd_train_predictor(args) -> dict:
    from .experiments import run_train_predictor

    payload = _load_config_file(args.config) if args.config else {}
    preset = args.preset or payload.get("preset", "linear-task-2d")
    seed = args.seed if args.seed is not None else payload.get("seed", 0)
    out = args.out or payload.get("out_dir", "out")
    n = args.samples or payload.get("samples", 10000)
    return run_train_predictor(preset, seed, out, n_samples=n)


def _cmd_train_score(args) -> dict:
    from .experiments import run_train_score

    payload = _load_config_file(args.config) if args.config else {}
    preset = args.preset or payload.get("preset", "dsm-gauss2d")
    seed = args.seed if args.seed is not None else payload.get("seed", 0)
    out = args.out or payload.get("out_dir", "out")
    n = args.samples or payload.get("samples", 10000)
    noise = args.noise_std if args.noise_std is not None else payload.get("noise_std", 0.1)
    return run_train_score(preset, seed, out, n_samples=n, noise_std=noise)


def _cmd_score(args) -> dict:
    from .experiments import run_score_files

    if not args.no_baseline and args.calibration is None:
        raise ConfigError("baseline correction requires --calibration "
                          "(or pass --no-baseline)")
    return run_score_files(
        args.test, args.calibration, args.predictor, args.score,
        args.out or "out", route=args.route or "exact",
        per_dimension=args.per_dimension, baseline=not args.no_baseline,
        seed=args.seed if args.seed is not None else 0, alpha=args.alpha)


_COMMANDS = {
    "experiment": _cmd_experiment,
    "train-predictor": _cmd_train_predictor,
    "train-score": _cmd_train_score,
    "score": _cmd_score,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        summary = _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
