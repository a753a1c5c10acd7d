"""Command-line entry point: ``sdcnet <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import net
from .datamodel import (ConfigError, FormatError, RunConfig, load_config, load_feature_table,
                        make_synthetic_dataset, save_feature_table, split_for_subject)
from .evaluation import (ablation_sweep, export_embeddings, loso_run, mi_topography, save_mi_csv,
                         write_atomic)
from .features import SpectralConfig, extract_de_features, load_raw_trials
from .trainer import Standardizer, fit


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p


def cmd_synth(args) -> None:
    table = make_synthetic_dataset(args.subjects, args.trials, args.windows, args.dim,
                                   args.classes, args.shift, args.noise, args.seed)
    save_feature_table(table, args.out)


def cmd_extract(args) -> None:
    trials = load_raw_trials(_existing(args.raw))
    cfg = SpectralConfig(window_seconds=args.window_sec,
                         hop_seconds=args.hop_sec if args.hop_sec else args.window_sec,
                         taper=args.taper)
    save_feature_table(extract_de_features(trials, cfg), args.out)


def _standardizer_extras(std: Standardizer) -> dict:
    return {"input_mean": std.mean, "input_scale": std.scale}


def _load_model(path):
    params, extras = net.load_checkpoint(_existing(path))
    std = None
    if "input_mean" in extras:
        std = Standardizer(np.atleast_1d(extras["input_mean"]), np.atleast_1d(extras["input_scale"]))
    return params, std


def cmd_train(args) -> None:
    table = load_feature_table(_existing(args.data))
    config = _config(args.config and _existing(args.config))
    if args.target_subject not in table.subjects:
        raise ValueError(f"target subject {args.target_subject} not in data "
                         f"(subjects: {table.subjects})")
    split = split_for_subject(table, args.target_subject)
    params, rep = fit(split, config, log_path=args.log)
    if args.checkpoint:
        extras = _standardizer_extras(rep.standardizer)
        for name, v in rep.optimizer.velocity.items():
            extras[f"velocity.{name}"] = v
        net.save_checkpoint(args.checkpoint, params, extras)
    print(json.dumps({"target_subject": args.target_subject,
                      "target_accuracy": rep.target_accuracy,
                      "steps": rep.steps}))


def cmd_loso(args) -> None:
    table = load_feature_table(_existing(args.data))
    config = _config(args.config and _existing(args.config))
    report = loso_run(table, config, jobs=args.jobs, bands=args.bands)
    report.save(args.report)
    if args.mi_csv and report.mi is not None:
        save_mi_csv(report.mi, args.mi_csv)
    print(json.dumps({"folds": len(report.fold_accuracies), "mean_accuracy": report.mean,
                      "std_accuracy": report.std,
                      "negative_transfer_count": report.negative_transfer_count}))


def cmd_ablate(args) -> None:
    table = load_feature_table(_existing(args.data))
    config = _config(args.config and _existing(args.config))
    rows = ablation_sweep(table, config, jobs=args.jobs)
    write_atomic(args.report, json.dumps({"rows": rows}, indent=1) + "\n")
    csv_path = Path(args.report).with_suffix(".csv")
    lines = ["strategy,mean_accuracy,std_accuracy,negative_transfer_count"]
    lines += [f"{r['strategy']},{r['mean_accuracy']!r},{r['std_accuracy']!r},"
              f"{r['negative_transfer_count']}" for r in rows]
    write_atomic(csv_path, "\n".join(lines) + "\n")
    for r in rows:
        print(f"{r['strategy']:<40s} {100 * r['mean_accuracy']:6.2f} +/- {100 * r['std_accuracy']:5.2f}")


def cmd_mimap(args) -> None:
    params, std = _load_model(args.checkpoint)
    table = load_feature_table(_existing(args.data))
    if table.dim % args.channels:
        raise ValueError(f"feature dim {table.dim} is not a multiple of --channels {args.channels}")
    bands = table.dim // args.channels
    x = std(table.features) if std is not None else table.features
    probs = net.predict_proba(params, x)
    save_mi_csv(mi_topography(table.features, probs, bands, args.channels), args.out)


def cmd_export_emb(args) -> None:
    params, std = _load_model(args.checkpoint)
    table = load_feature_table(_existing(args.data))
    export_embeddings(params, table, args.out, std)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdcnet", description="Domain-adaptive EEG feature classifier.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic covariate-shift feature table")
    s.add_argument("--subjects", type=int, default=6, help="number of subjects")
    s.add_argument("--trials", type=int, default=5, help="trials per subject")
    s.add_argument("--windows", type=int, default=40, help="windows per trial")
    s.add_argument("--dim", type=int, default=20, help="feature dimension")
    s.add_argument("--classes", type=int, default=3, help="number of classes")
    s.add_argument("--shift", type=float, default=1.0, help="per-subject shift strength")
    s.add_argument("--noise", type=float, default=0.2, help="within-class noise sigma")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--out", required=True, help="output feature CSV")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="differential-entropy features from raw trial CSV")
    s.add_argument("--raw", required=True, help="raw trial CSV")
    s.add_argument("--out", required=True, help="output feature CSV")
    s.add_argument("--window-sec", type=float, default=1.0, help="STFT window length (s)")
    s.add_argument("--hop-sec", type=float, default=None, help="hop (s); default = window")
    s.add_argument("--taper", choices=("hann", "rectangular"), default="hann", help="window taper")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="adapt to one held-out subject")
    s.add_argument("--data", required=True, help="labeled feature CSV")
    s.add_argument("--target-subject", type=int, required=True, help="subject used as target")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--log", help="JSON-lines per-epoch log")
    s.add_argument("--checkpoint", help="write model checkpoint here")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("loso", cmd_loso, "leave-one-subject-out evaluation"),
                                 ("ablate", cmd_ablate, "six single-component ablations + full model")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data", required=True, help="labeled feature CSV")
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--report", required=True, help="output JSON report")
        s.add_argument("--jobs", type=int, default=1, help="parallel folds")
        if name == "loso":
            s.add_argument("--bands", type=int, default=5, help="bands per channel for MI")
            s.add_argument("--mi-csv", help="also write the MI tensor as CSV")
        s.set_defaults(func=func)

    s = sub.add_parser("mimap", help="mutual-information topography CSV")
    s.add_argument("--checkpoint", required=True, help="model checkpoint")
    s.add_argument("--data", required=True, help="feature CSV")
    s.add_argument("--channels", type=int, required=True, help="number of channels")
    s.add_argument("--out", required=True, help="output CSV (class,band,channel,value)")
    s.set_defaults(func=cmd_mimap)

    s = sub.add_parser("export-emb", help="export 2nd-layer embeddings as CSV")
    s.add_argument("--checkpoint", required=True, help="model checkpoint")
    s.add_argument("--data", required=True, help="feature CSV")
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_export_emb)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        args.func(args)
    except (FormatError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
