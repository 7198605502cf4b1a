"""Command-line entry point: ``analyze``, ``train``, ``sweep``, ``evaluate`` and ``report``.

Every command prints JSON (or CSV where noted) to stdout; ``--pretty``
switches to a plain-text table for people.
"""
from __future__ import annotations

import argparse
import json
import sys

from .data_io import load_dataset
from .errors import DatasetNotFoundError, ParseError, RunAbortedError
from .experiment import TrainConfig, read_results, rf_sweep, run_protocol
from .kernel_config import analyze
from .models import FCN_REFERENCE_WEIGHTS
from .stats import (
    AccuracyMatrix,
    relative_accuracy_report,
    rows_to_csv,
    wilcoxon_holm,
    wins_losses_ties_from_csv,
    wins_table,
)

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


def _emit(obj, pretty: bool, out) -> None:
    if not pretty:
        out.write(json.dumps(obj, sort_keys=True) + "\n")
        return
    rows = obj if isinstance(obj, list) else [obj]
    for row in rows:
        for key in sorted(row):
            value = row[key]
            if isinstance(value, float):
                value = f"{value:.8f}"
            elif isinstance(value, (dict, list)):
                value = json.dumps(value)
            out.write(f"{key:>24}  {value}\n")
        out.write("\n")


def _config_from(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seeds=tuple(range(args.seed, args.seed + args.seeds)),
        znorm=args.znorm,
        interpolate=args.interpolate,
    )


def _model_overrides(args) -> dict:
    out = {}
    if args.branch_channels is not None:
        out["branch_channels"] = args.branch_channels
    if args.budget is not None:
        out["weight_budget"] = args.budget
    return out


def cmd_analyze(args, out) -> int:
    rec = analyze(args.length, in_channels=args.variates, weight_budget=args.budget,
                  branch_channels=args.branch_channels)
    _emit(rec, args.pretty, out)
    return EXIT_OK


def cmd_train(args, out) -> int:
    train, test = load_dataset(args.dataset, args.data_root, args.manifest)
    res = run_protocol(train, test, _config_from(args), args.model, jobs=args.jobs, out_path=args.out,
                       dataset_name=args.dataset, **_model_overrides(args))
    _emit(res.to_dict(), args.pretty, out)
    return EXIT_OK


def cmd_sweep(args, out) -> int:
    train, test = load_dataset(args.dataset, args.data_root, args.manifest)
    results = rf_sweep(train, test, args.rf, args.mode, _config_from(args), jobs=args.jobs, out_path=args.out,
                       os_overrides=_model_overrides(args))
    _emit([r.to_dict() for r in results], args.pretty, out)
    return EXIT_OK


def cmd_evaluate(args, out) -> int:
    if args.compare:
        row = wins_losses_ties_from_csv(*args.compare)
        _emit(row, args.pretty, out)
        return EXIT_OK
    if args.accuracies is None:
        raise _UsageError("evaluate needs --accuracies FILE or --compare A.csv B.csv")
    matrix = AccuracyMatrix.from_csv(args.accuracies).complete().rounded()
    report = wilcoxon_holm(matrix, args.alpha).to_dict()
    if args.candidate:
        report["wins"] = wins_table(matrix, args.candidate)
    if args.cd_out:
        with open(args.cd_out, "w", encoding="utf-8") as fh:
            json.dump({"ranks": report["ranks"], "cliques": report["cliques"]}, fh, sort_keys=True)
    _emit(report, args.pretty, out)
    return EXIT_OK


def cmd_report(args, out) -> int:
    if args.results:
        matrix = _matrix_from_results(args.results)
        out.write(matrix.to_csv())
        return EXIT_OK
    if not (args.accuracies and args.candidate and args.baselines):
        raise _UsageError("report needs --results FILE, or --accuracies FILE --candidate NAME --baselines NAME...")
    matrix = AccuracyMatrix.from_csv(args.accuracies)
    names = [args.candidate] + args.baselines
    matrix = matrix.complete(names)
    rows = relative_accuracy_report(matrix.column_dict(args.candidate),
                                    {b: matrix.column_dict(b) for b in args.baselines})
    text = rows_to_csv(rows, args.out)
    out.write(text)
    return EXIT_OK


def _matrix_from_results(path) -> AccuracyMatrix:
    results = [r for r in read_results(path) if r.status == "complete"]
    models = list(dict.fromkeys(r.model for r in results))
    datasets = list(dict.fromkeys(r.dataset for r in results))
    matrix = AccuracyMatrix(models, datasets, [[float("nan")] * len(models) for _ in datasets],
                            {m: "own-run" for m in models})
    for r in results:  # later lines win
        matrix.values[datasets.index(r.dataset), models.index(r.model)] = r.mean_accuracy
    return matrix


class _UsageError(Exception):
    pass


def _add_train_flags(p):
    p.add_argument("--dataset", required=True)
    p.add_argument("--data-root", default=None, help="archive folder (default: $OSCNN_DATA_ROOT)")
    p.add_argument("--manifest", default=None, help="JSON file mapping dataset names to train/test files")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--znorm", action="store_true")
    p.add_argument("--interpolate", action="store_true", help="fill missing values linearly")
    p.add_argument("--branch-channels", type=int, default=None)
    p.add_argument("--budget", type=int, default=None, help=f"weight budget (default {FCN_REFERENCE_WEIGHTS})")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="append results to this JSON-lines file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omniscale", description="Omni-scale CNN toolkit for time series classification.")
    parser.add_argument("--pretty", action="store_true", help="human-readable output instead of JSON")
    sub = parser.add_subparsers(dest="command")
    common = argparse.ArgumentParser(add_help=False)
    # also accepted after the subcommand; SUPPRESS keeps the top-level value otherwise
    common.add_argument("--pretty", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("analyze", parents=[common], help="kernel plan and weight counts for a series length")
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--variates", type=int, default=1)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--branch-channels", type=int, default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", parents=[common], help="train a model over several seeds")
    _add_train_flags(p)
    p.add_argument("--model", default="os-cnn", help="os-cnn | os-cnn-res:K | mos-cnn | fcn")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common], help="scaled-FCN receptive-field sweep plus one OS-CNN")
    _add_train_flags(p)
    p.add_argument("--rf", type=int, nargs="+", required=True)
    p.add_argument("--mode", choices=("fixed_channels", "fixed_size"), default="fixed_size")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", parents=[common], help="ranks, signed-rank tests and cliques from an accuracy CSV")
    p.add_argument("--accuracies", default=None)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--candidate", default=None, help="also emit wins/losses/ties for this classifier")
    p.add_argument("--compare", nargs=2, metavar=("CANDIDATE_CSV", "BASELINE_CSV"), default=None)
    p.add_argument("--cd-out", default=None, help="write {ranks, cliques} JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="relative accuracy CSV, or an accuracy matrix from run results")
    p.add_argument("--results", default=None, help="JSON-lines run results")
    p.add_argument("--accuracies", default=None)
    p.add_argument("--candidate", default=None)
    p.add_argument("--baselines", nargs="+", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, out)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"omniscale: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunAbortedError as exc:
        print(f"omniscale: {exc}", file=sys.stderr)
        out.write(json.dumps(exc.partial.to_dict(), sort_keys=True) + "\n")
        return EXIT_ERROR
    except (ValueError, RuntimeError, DatasetNotFoundError, ParseError, OSError) as exc:
        print(f"omniscale: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
