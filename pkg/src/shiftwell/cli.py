"""Command-line entry point.

Every subcommand reads CSV inputs, writes its outputs atomically and leaves
a ``manifest.json`` (or ``<output>.manifest.json`` for single-file outputs)
recording the resolved settings, seeds and file hashes. Errors are printed
as ``error[<category>]: <message>`` with exit status 2 for usage errors,
3 for data errors, 4 for configuration errors and 1 otherwise.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import harness, synth
from .cohort_stats import compare_groups, format_report
from .errors import ConfigError, DataError, ShiftwellError, UsageError
from .features import build_feature_table, load_raw_frames, read_feature_table
from .harness import (BASELINE, CLASS_NAMES, EXPERIMENT_VARIANTS, build_dataset, load_grid,
                      load_trained, normalize_task, run_experiment, save_trained, train_final)
from .introspection import importance_report
from .io import INPUT_COLUMNS, atomic_write_text, read_table, sha256_file, write_csv
from .model import VARIANTS, ModelConfig, load_config, predict
from .schema import LABELS, SCHEMA

log = logging.getLogger("shiftwell")

EXIT_CODES = {UsageError: 2, DataError: 3, ConfigError: 4}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- manifest -------------------------------------------------------------------------

def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _hashes(paths) -> dict[str, str]:
    return {str(p): sha256_file(p) for p in paths if Path(p).is_file()}


def write_manifest(path, command: str, argv: Sequence[str], config: dict, seeds: dict,
                   inputs, outputs, started: str) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": _version(),
        "config": config,
        "seeds": seeds,
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _file_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


# --- shared input handling ------------------------------------------------------------

def _features_path(args) -> Path:
    return Path(args.features) if args.features else Path(args.data) / "features.csv"


def _load_dataset(args):
    fpath = _features_path(args)
    lpath = Path(args.data) / "labels.csv"
    ppath = Path(args.data) / "participants.csv"
    features = read_feature_table(fpath)
    labels = read_table(lpath, INPUT_COLUMNS["labels"])
    participants = read_table(ppath, INPUT_COLUMNS["participants"])
    return build_dataset(features, labels, participants), [fpath, lpath, ppath]


def _split_list(text: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError("expected a non-empty comma-separated list")
    return items


def _roles_for(features: pd.DataFrame, participants_path) -> np.ndarray:
    participants = read_table(participants_path, INPUT_COLUMNS["participants"])
    role_of = dict(zip(participants["participant_id"].astype(str), participants["role"]))
    pids = features["participant_id"].astype(str)
    unknown = sorted(set(pids) - set(role_of))
    if unknown:
        raise DataError(f"{participants_path}: no role for participants {unknown[:5]}")
    return pids.map(role_of).to_numpy()


# --- subcommands ----------------------------------------------------------------------

def cmd_synth(args, argv) -> None:
    started = _now()
    spec = synth.load_spec(args.spec) if args.spec else synth.CohortSpec()
    bundle = synth.generate(spec, seed=args.seed)
    out = Path(args.out)
    paths = synth.write_bundle(bundle, out)
    checks = synth.self_check(bundle, spec, raise_on_failure=False)
    calib = out / "calibration.csv"
    write_csv(synth.checks_frame(checks), calib)
    failed = [c.name for c in checks if not c.passed]
    outputs = [*paths.values(), calib]
    write_manifest(out / "manifest.json", "synth", argv, spec.to_dict(), {"seed": args.seed},
                   [args.spec] if args.spec else [], outputs, started)
    print(f"wrote {len(bundle.features)} participant-days to {out}")
    if failed:
        print(f"calibration checks outside tolerance: {', '.join(failed)}", file=sys.stderr)


def cmd_features(args, argv) -> None:
    started = _now()
    frames = load_raw_frames(args.data)
    table = build_feature_table(frames)
    out = Path(args.out) if args.out else Path(args.data) / "features.csv"
    write_csv(table, out)
    inputs = [Path(args.data) / f"{n}.csv" for n in ("hr", "steps", "sleep", "survey", "participants")]
    write_manifest(_file_manifest(out), "features", argv, {}, {}, inputs, [out], started)
    print(f"wrote {len(table)} feature rows to {out}")


def cmd_compare(args, argv) -> None:
    started = _now()
    features = read_feature_table(args.features)
    participants = read_table(args.participants, INPUT_COLUMNS["participants"])
    roles = dict(zip(participants["participant_id"].astype(str), participants["role"]))
    features["participant_id"] = features["participant_id"].astype(str)
    report = compare_groups(features, roles)
    out = Path(args.out)
    text_path = out.with_suffix(".txt")
    write_csv(report, out)
    text = format_report(report)
    atomic_write_text(text_path, text + "\n")
    write_manifest(_file_manifest(out), "compare", argv, {}, {},
                   [args.features, args.participants], [out, text_path], started)
    print(text)


def _model_config(args) -> ModelConfig:
    config = load_config(args.config) if args.config else ModelConfig()
    changes = {}
    if args.variant:
        changes["variant"] = args.variant
    variant = changes.get("variant", config.variant)
    if variant in ("mt", "nn"):
        if not args.label:
            raise UsageError(f"variant {variant!r} predicts one label; pass --label")
        changes["labels"] = (args.label,)
    elif args.label:
        raise UsageError("--label only applies to the single-label variants mt and nn")
    elif config.variant in ("mt", "nn"):
        changes["labels"] = LABELS
    return config.replace(**changes) if changes else config


def cmd_train(args, argv) -> None:
    started = _now()
    dataset, inputs = _load_dataset(args)
    if args.config:
        inputs.append(Path(args.config))
    task = normalize_task(args.task)
    config = _model_config(args)
    net, _prep, result = train_final(dataset, config, task, seed=args.seed,
                                     validation_fraction=args.validation_fraction)
    out = Path(args.out)
    save_trained(out, net, _prep, extra_header={"seed": args.seed})
    curve = out.with_name(out.stem + "_training.csv")
    epochs = np.arange(1, len(result.train_loss) + 1)
    frame = pd.DataFrame({"epoch": epochs, "train_loss": result.train_loss})
    if result.val_loss:
        frame["val_loss"] = result.val_loss
    write_csv(frame, curve)
    write_manifest(_file_manifest(out), "train", argv, net.config.to_dict(),
                   {"seed": args.seed, "model_seed": net.config.seed}, inputs, [out, curve], started)
    print(f"trained {net.config.variant} ({task}) for {len(epochs)} epochs, "
          f"best epoch {result.best_epoch}; model written to {out}")


def cmd_evaluate(args, argv) -> None:
    started = _now()
    dataset, inputs = _load_dataset(args)
    variants = _split_list(args.variants)
    bad = [v for v in variants if v not in EXPERIMENT_VARIANTS + (BASELINE,)]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from {EXPERIMENT_VARIANTS}")
    if BASELINE not in variants and not args.no_baseline:
        variants.append(BASELINE)
    tasks = [normalize_task(t) for t in _split_list(args.tasks)]
    grid = load_grid(args.grid) if args.grid else None
    base = load_config(args.config) if args.config else None
    for extra in (args.grid, args.config):
        if extra:
            inputs.append(Path(extra))
    result = run_experiment(dataset, variants, tasks, grid, seed=args.seed,
                            repetitions=args.repetitions, n_folds=args.folds, level=args.level,
                            base_config=base, jobs=args.jobs)
    out = Path(args.out)
    paths = result.write(out)
    config = {"variants": variants, "tasks": tasks, "repetitions": args.repetitions,
              "folds": args.folds, "level": args.level,
              "base_config": (base or ModelConfig()).to_dict(),
              "grid": grid if grid is not None else {t: harness.default_grid(t) for t in tasks}}
    write_manifest(out / "manifest.json", "evaluate", argv, config, {"seed": args.seed},
                   inputs, list(paths.values()), started)
    print(result.metrics[["variant", "task", "label", "metric", "mean", "sd"]].to_string(index=False))


def cmd_predict(args, argv) -> None:
    started = _now()
    net, prep, _ = load_trained(args.model)
    features = read_feature_table(args.features)
    roles = _roles_for(features, args.participants)
    x = prep.transform(features[list(SCHEMA.names)].to_numpy(dtype=np.float64))
    pred = predict(net, x, roles)
    out_df = pd.DataFrame({"participant_id": features["participant_id"].astype(str),
                           "date": features["date"].astype(str)})
    task = net.config.task_mode
    for j, label in enumerate(pred.labels):
        if task == "regression":
            out_df[label] = pred.values[:, j]
        else:
            names = CLASS_NAMES[task]
            out_df[label] = [names[int(c)] for c in pred.values[:, j]]
            for k, name in enumerate(names):
                out_df[f"{label}_p_{name}"] = pred.probabilities[j][:, k]
    out = Path(args.out)
    write_csv(out_df, out)
    write_manifest(_file_manifest(out), "predict", argv, net.config.to_dict(), {},
                   [args.model, args.features, args.participants], [out], started)
    print(f"wrote {len(out_df)} predictions to {out}")


def cmd_analyze(args, argv) -> None:
    started = _now()
    net, prep, _ = load_trained(args.model)
    features = read_feature_table(args.features)
    x = features[list(SCHEMA.names)].to_numpy(dtype=np.float64)
    report = importance_report(net, x, prep)
    out = Path(args.out)
    corr = out.with_name(out.stem + "_correlations.csv")
    write_csv(report.to_frame(), out)
    write_csv(report.correlation_frame(), corr)
    write_manifest(_file_manifest(out), "analyze", argv, net.config.to_dict(), {},
                   [args.model, args.features], [out, corr], started)
    print("top features: " + ", ".join(report.top(8)))


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shiftwell", description="Shift-worker wellbeing forecasting pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic cohort bundle")
    s.add_argument("--spec", help="JSON cohort spec overriding the defaults")
    s.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="build features.csv from raw CSV tables")
    s.add_argument("--data", required=True, help="directory holding hr/steps/sleep/survey/participants.csv")
    s.add_argument("--out", help="output file (default DATA/features.csv)")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("compare", help="nurse vs doctor feature comparison")
    s.add_argument("--features", required=True, help="features.csv")
    s.add_argument("--participants", required=True, help="participants.csv")
    s.add_argument("--out", required=True, help="report CSV; an aligned .txt copy is written beside it")
    s.set_defaults(func=cmd_compare)

    def data_args(s):
        s.add_argument("--data", required=True,
                       help="directory holding labels.csv, participants.csv and features.csv")
        s.add_argument("--features", help="features file (default DATA/features.csv)")
        s.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        s.add_argument("--config", help="JSON model config")

    s = sub.add_parser("train", help="train one network on a whole dataset")
    data_args(s)
    s.add_argument("--variant", choices=VARIANTS, help="network variant (default from config)")
    s.add_argument("--label", choices=LABELS, help="label for the single-label variants mt and nn")
    s.add_argument("--task", default="regression", help="regression, binary or three (default regression)")
    s.add_argument("--validation-fraction", type=float, default=0.2,
                   help="share of rows held out for early stopping (default 0.2; 0 disables)")
    s.add_argument("--out", required=True, help="model file")
    s.set_defaults(func=cmd_train)

    for name in ("evaluate", "run"):
        s = sub.add_parser(name, help="repeated-split evaluation with grid search"
                           + (" (alias of evaluate)" if name == "run" else ""))
        data_args(s)
        s.add_argument("--variants", default="mtml,mt,ml,nn",
                       help=f"comma-separated subset of {','.join(EXPERIMENT_VARIANTS)} (default mtml,mt,ml,nn)")
        s.add_argument("--tasks", default="regression,binary,three",
                       help="comma-separated tasks (default regression,binary,three)")
        s.add_argument("--grid", help="JSON grid file (default built-in grid per task)")
        s.add_argument("--repetitions", type=int, default=10, help="80/20 splits (default 10)")
        s.add_argument("--folds", type=int, default=10, help="inner CV folds (default 10)")
        s.add_argument("--level", choices=("row", "participant"), default="row",
                       help="split unit (default row)")
        s.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
        s.add_argument("--no-baseline", action="store_true",
                       help="omit the mean/majority baseline rows")
        s.add_argument("--out", required=True, help="output directory")
        s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="predict next-day wellbeing with a trained model")
    s.add_argument("--model", required=True, help="model file written by train")
    s.add_argument("--features", required=True, help="features.csv")
    s.add_argument("--participants", required=True, help="participants.csv (roles)")
    s.add_argument("--out", required=True, help="predictions CSV")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("analyze", help="conv-layer feature importance of a trained model")
    s.add_argument("--model", required=True, help="model file written by train")
    s.add_argument("--features", required=True, help="features.csv used for correlations")
    s.add_argument("--out", required=True, help="importance CSV; correlations go to <stem>_correlations.csv")
    s.set_defaults(func=cmd_analyze)
    return p


def _category(exc: BaseException) -> str:
    for cls, name in ((UsageError, "usage"), (DataError, "data"), (ConfigError, "config")):
        if isinstance(exc, cls):
            return name
    return "internal" if not isinstance(exc, ShiftwellError) else "runtime"


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("a subcommand is required; see --help")
        args.func(args, argv)
        return 0
    except ShiftwellError as exc:
        print(f"error[{_category(exc)}]: {exc}", file=sys.stderr)
        return next((code for cls, code in EXIT_CODES.items() if isinstance(exc, cls)), 1)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
