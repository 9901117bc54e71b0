"""Command line entry point: ``nlbench <command> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

from nlbench.backbone import CheckpointError
from nlbench.dataman import ManifestError
from nlbench.experiment import (ConfigError, ExperimentConfig, cmd_difficulty, cmd_inject, cmd_pretrain,
                                cmd_robustness, cmd_train, rerun)
from nlbench.metrics import SweepTable
from nlbench.results import ResultsStore, load_records, recompute_best_last, results_root

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("nlbench")


class DataError(Exception):
    """Missing or unusable inputs (exit code 3)."""


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    return ExperimentConfig.load(args.config, args.set)


def _records(pattern: str | None, root: Path):
    records = load_records(pattern or root)
    if not records:
        raise DataError(f"no run records match {pattern or str(root)!r} (0 matches)")
    return records


def _print_rows(rows: list[dict], cols: list[str]) -> None:
    print("\t".join(cols))
    for r in rows:
        print("\t".join("" if r.get(c) is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]))
                        for c in cols))


def run_inject(args) -> int:
    for p in cmd_inject(_config(args), args.out):
        print(p)
    return EXIT_OK


def run_pretrain(args) -> int:
    print(cmd_pretrain(_config(args)))
    return EXIT_OK


def run_train(args) -> int:
    store = ResultsStore(args.results)
    if args.rerun:
        original = store.read(args.rerun)
        again = rerun(original)
        same = original.report.series == again.report.series
        print(f"{original.run_id}\t{'identical' if same else 'DIFFERENT'}")
        return EXIT_OK if same else EXIT_RUNTIME
    rows = cmd_train(_config(args), store)
    for r in rows:
        r["best_mean"], r["best_std"] = r["best"]["mean"], r["best"]["std"]
        r["last_mean"], r["last_std"] = r["last"]["mean"], r["last"]["std"]
        r["runs"] = len(r["run_ids"])
    _print_rows(rows, ["dataset", "method", "epsilon", "runs", "best_mean", "best_std", "last_mean", "last_std"])
    return EXIT_OK


def run_eval(args) -> int:
    """Report BEST/LAST per stored run, recomputed from the per-epoch series."""
    rows, mismatched = [], 0
    for r in _records(args.pattern, results_root(args.results)):
        best, last = recompute_best_last(r)
        ok = best == r.best and last == r.last
        mismatched += not ok
        rows.append({"run_id": r.run_id, "seed": r.seed, "epsilon": (r.config.get("noise") or {}).get("epsilon"),
                     "method": (r.config.get("lnl") or {}).get("method", "ce"), "best": best, "last": last,
                     "consistent": ok})
    _print_rows(rows, ["run_id", "method", "epsilon", "seed", "best", "last", "consistent"])
    return EXIT_OK if not mismatched else EXIT_RUNTIME


def run_difficulty(args) -> int:
    cfg = _config(args)
    out = cmd_difficulty(cfg)
    store = ResultsStore(args.results)
    path = store.write_aggregate(f"difficulty_{Path(args.config).stem}", out)
    if "sweep" in out:
        print(SweepTable(out["sweep"]["axis"], out["sweep"]["rows"], out["sweep"]["skipped"]).to_text("\t"), end="")
    for name, v in (out.get("css") or {}).items():
        if isinstance(v, dict):
            print(f"css\t{name}\t{v['css']:.6g}\t{'flagged' if v['flagged'] else ''}")
    print(path)
    return EXIT_OK


def run_robustness(args) -> int:
    rows = cmd_robustness(_records(args.pattern, results_root(args.results)), args.metric, args.max_rate)
    if args.json:
        print(json.dumps(rows, indent=1))
    else:
        _print_rows(rows, ["dataset", "method", "pretrain", "task", "freeze", "noise_kind", "score", "flagged"])
    return EXIT_OK


def run_plot(args) -> int:
    from nlbench import plotting

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "sweep":
        files = sorted(glob.glob(args.pattern, recursive=True)) if args.pattern else \
            sorted(str(p) for p in (results_root(args.results) / "aggregates").glob("difficulty_*.json"))
        tables = plotting.load_sweep_tables(files)
        if not tables:
            raise DataError(f"no sweep tables match {args.pattern!r} (0 matches)")
        paths = plotting.plot_sweep(tables, out)
    else:
        records = _records(args.pattern, results_root(args.results))
        paths = {"f1_vs_noise": plotting.plot_f1_vs_noise, "confusion": plotting.plot_confusion,
                 "robustness_bar": plotting.plot_robustness_bar}[args.kind](records, out)
    for p in paths:
        print(p)
    return EXIT_OK


def run_validate(args) -> int:
    cfg = _config(args)
    print(cfg.dump(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlbench", description="Label-noise benchmarking toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help, config=True):
        p = sub.add_parser(name, help=help)
        if config:
            p.add_argument("-c", "--config", help="experiment YAML file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config key, e.g. lnl.epochs=5 (repeatable)")
        p.add_argument("--results", help="results root (default: $NLBENCH_RESULTS or ./results)")
        p.set_defaults(func=fn)
        return p

    p = add("inject", run_inject, "write noisy manifests (one per noise rate)")
    p.add_argument("--out", help="output directory (default: config output)")
    add("pretrain", run_pretrain, "self-supervised pretraining; prints the checkpoint path")
    p = add("train", run_train, "noisy-label training over seeds and noise rates")
    p.add_argument("--rerun", metavar="RUN_ID", help="re-execute a stored run single-threaded and compare")
    p = add("eval", run_eval, "BEST/LAST of stored runs", config=False)
    p.add_argument("pattern", nargs="?", help="run JSON files or results directories (glob)")
    add("difficulty", run_difficulty, "difficulty sweep and class separability")
    p = add("robustness", run_robustness, "robustness scores from stored runs", config=False)
    p.add_argument("pattern", nargs="?")
    p.add_argument("--metric", choices=("last", "best"), default="last")
    p.add_argument("--max-rate", type=float, default=None)
    p.add_argument("--json", action="store_true")
    p = add("plot", run_plot, "figures from stored runs", config=False)
    p.add_argument("pattern", nargs="?")
    p.add_argument("--kind", required=True, choices=("f1_vs_noise", "sweep", "confusion", "robustness_bar"))
    p.add_argument("--out", default="figures")
    add("validate-config", run_validate, "validate a config and print the effective tree")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
