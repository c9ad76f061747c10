"""Command line entry point.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime error,
3 marking infeasible.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data as ds
from . import fed, mechanism, nn, reporting
from .config import ExperimentConfig, load_config
from .errors import ConfigError, FedVerifyError, MarkingInfeasible

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_MARKING = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; we want 1 and a single code path
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "method", None):
        cfg = dataclasses.replace(cfg, unlearn=dataclasses.replace(cfg.unlearn, method=args.method))
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    train, test, part = mechanism.build_data(cfg)
    spec = mechanism.model_spec(cfg, train)
    clients = fed.split_clients(train, part)
    state = fed.init_state(spec, cfg.fl)
    rows = []
    for t in range(cfg.fl.total_rounds):
        fed.run_round(state, spec, clients, cfg.fl)
        rows.append({"round": t,
                     "test_accuracy": nn.accuracy(spec, state.params, test.x, test.y),
                     "test_loss": float(nn.per_sample_losses(spec, state.params, test.x,
                                                             test.y).mean())})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reporting.write_text(out / "train.csv", reporting.csv_text(rows))
    state.history.save(out / "history.bin")
    print(f"final test accuracy {reporting.fmt(rows[-1]['test_accuracy'])} "
          f"after {len(rows)} rounds; wrote {out}")
    return EXIT_OK


def _print_summary(s: dict) -> None:
    keys = ("method", "marker_kind", "metric", "baseline", "at_t_u", "metric_diff",
            "threshold", "verify_decision", "attack_flag", "correlation_r",
            "distance_euclidean", "distance_cosine", "membership_ratio")
    for k in keys:
        if k in s:
            print(f"{k:20s} {reporting.fmt(s[k])}")


def cmd_experiment(args) -> int:
    cfg = _load(args)
    log = mechanism.run_experiment(cfg)
    paths = reporting.emit_all(log, args.out, args.stem)
    if log.status == "marking_infeasible":
        print(f"marking infeasible: {log.summary.get('marking_error')}", file=sys.stderr)
        return EXIT_MARKING
    _print_summary(log.summary)
    print(f"wrote {paths['summary_json']}")
    return EXIT_OK


def _parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(int(tok))
        except ValueError:
            try:
                out.append(float(tok))
            except ValueError as exc:
                raise ConfigError(f"sweep value {tok!r} is not a number") from exc
    if not out:
        raise ConfigError("--values is empty")
    return out


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.axis not in mechanism.SWEEP_AXES:
        raise ConfigError(f"unknown axis {args.axis!r}; choose from {', '.join(mechanism.SWEEP_AXES)}")
    values = _parse_values(args.values)
    logs = mechanism.sweep(cfg, args.axis, values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v, lg in zip(values, logs):
        reporting.emit_all(lg, out, f"{args.axis}_{v}")
    rows = reporting.sweep_rows(args.axis, values, logs)
    text = reporting.csv_text(rows)
    reporting.write_text(out / f"sweep_{args.axis}.csv", text)
    print(text, end="")
    if all(lg.status == "marking_infeasible" for lg in logs):
        return EXIT_MARKING
    return EXIT_OK


def cmd_report(args) -> int:
    log = reporting.load_log(args.log)
    if log.status == "marking_infeasible":
        print(f"marking infeasible: {log.summary.get('marking_error')}")
        return EXIT_MARKING
    _print_summary(log.summary)
    if args.json:
        print(reporting.dumps({k: v for k, v in log.summary.items() if k != "marker_set"}))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.idx_images or args.idx_labels:
        if not (args.idx_images and args.idx_labels):
            raise ConfigError("--idx-images and --idx-labels go together")
        train = ds.load_idx(args.idx_images, args.idx_labels, downscale=not args.no_downscale)
        ds.save_dataset(out / "train.vfds", train)
        print(f"wrote {out / 'train.vfds'} ({len(train)} samples, d={train.feature_dim})")
        return EXIT_OK
    train, test = ds.gen_synthetic_split(
        args.classes, args.dim, args.per_class, args.test_per_class, args.spread,
        args.rare_fraction, args.seed if args.seed is not None else 0,
    )
    ds.save_dataset(out / "train.vfds", train)
    ds.save_dataset(out / "test.vfds", test)
    hist = train.class_histogram()
    print(f"wrote {out} train={len(train)} test={len(test)} "
          f"per-class min/max {int(np.min(hist))}/{int(np.max(hist))}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = _Parser(prog="fedverify", description="Verify unlearning in federated learning.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="plain FL run")
    t.add_argument("config", nargs="?", default=None)
    t.add_argument("--out", default="runs/train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("experiment", parents=[common], help="mark, unlearn, check, leave")
    e.add_argument("config")
    e.add_argument("--method", default=None, help="override unlearn.method")
    e.add_argument("--out", default="runs")
    e.add_argument("--stem", default="experiment")
    e.set_defaults(func=cmd_experiment)

    s = sub.add_parser("sweep", parents=[common], help="run an experiment per axis value")
    s.add_argument("config")
    s.add_argument("--axis", required=True, help=", ".join(mechanism.SWEEP_AXES))
    s.add_argument("--values", required=True, help="comma separated")
    s.add_argument("--method", default=None)
    s.add_argument("--out", default="runs/sweep")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="print the verification summary of a log")
    r.add_argument("log", help="path to a *.summary.json")
    r.add_argument("--json", action="store_true", help="also print the summary as JSON")
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic or IDX data as blobs")
    g.add_argument("--out", default="data")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--test-per-class", type=int, default=50)
    g.add_argument("--spread", type=float, default=0.3)
    g.add_argument("--rare-fraction", type=float, default=0.05)
    g.add_argument("--idx-images", default=None)
    g.add_argument("--idx-labels", default=None)
    g.add_argument("--no-downscale", action="store_true")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MarkingInfeasible as exc:
        print(f"marking infeasible: {exc}", file=sys.stderr)
        return EXIT_MARKING
    except FedVerifyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
