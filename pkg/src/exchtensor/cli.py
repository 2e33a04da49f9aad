"""Command-line surface: train, evaluate, factorize, verify, sample-check.

Configuration comes from an optional flat ``key = value`` file plus
command-line flags; flags win.  Every command is deterministic given
``--seed``.  Metrics are emitted as line-delimited JSON records to
stdout and, when ``--out`` is set, to a file as well.  Exit codes:
0 success, 1 check or metric failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    FIVE_STAR,
    RatingScale,
    RatingsTable,
    canonical_split,
    encode_onehot,
    parse_ratings,
    rebin_scale,
    synthetic_lowrank_table,
)
from .models import ModelConfig, init_params
from .sampling import (
    conditional_subsample,
    row_marginal,
    uniform_subsample,
)
from .training import TrainConfig, evaluate, train
from .verify import run_verifier_suite

__all__ = ["main"]


class UsageError(Exception):
    """Bad flags, paths, or configuration; exits with code 2."""


def _parse_scale(text: str) -> RatingScale:
    """'1-5' integer scale, 'lo-hi:step' arange, or a comma level list."""
    text = text.strip()
    try:
        if "," in text:
            return RatingScale(tuple(float(x) for x in text.split(",")))
        if ":" in text:
            span, step = text.rsplit(":", 1)
            lo, hi = span.split("-")
            return RatingScale(
                tuple(np.arange(float(lo), float(hi) + float(step) / 2,
                                float(step)))
            )
        lo, hi = text.split("-")
        return RatingScale.integer(int(lo), int(hi))
    except (ValueError, TypeError) as exc:
        raise UsageError(f"cannot parse scale {text!r}: {exc}") from exc


def _parse_widths(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


def _load_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' comments; keys use - or _ freely."""
    out: dict[str, str] = {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path} does not exist")
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


class Settings:
    """Flag values merged over config-file values merged over defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = (
            _load_config_file(args.config) if getattr(args, "config", None)
            else {}
        )

    def get(self, key: str, default=None, cast=str):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return cast(flag) if isinstance(flag, str) and cast is not str \
                else flag
        if key in self.file:
            raw = self.file[key]
            if cast is bool:
                return raw.lower() in ("1", "true", "yes", "on")
            return cast(raw)
        return default


def _emit(record: dict, out_file) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line)
    if out_file is not None:
        out_file.write(line + "\n")


def _out_dir(settings: Settings) -> Path | None:
    out = settings.get("out")
    if out is None:
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_data_table(
    settings: Settings, scale: RatingScale, density: float | None = None
) -> RatingsTable:
    """One ratings table from --data; 'synthetic' builds the benchmark.

    ``density`` pins the synthetic table's observed fraction for commands
    where --observed-fraction means something else (the evaluate split).
    """
    data = settings.get("data")
    if data is None:
        raise UsageError("--data is required")
    seed = settings.get("seed", 0, int)
    if data == "synthetic":
        p = density if density is not None \
            else settings.get("observed_fraction", 0.3, float)
        return synthetic_lowrank_table(observed_fraction=p, seed=seed)
    path = Path(data)
    if not path.exists():
        raise UsageError(f"data path {data} does not exist")
    fmt = settings.get("format", "movielens-tab")
    rebin_from = settings.get("rebin_from")
    rebin_to = settings.get("rebin_to")
    if (rebin_from is None) != (rebin_to is None):
        raise UsageError("--rebin-from and --rebin-to must be given together")
    if rebin_from is not None:
        src = _parse_scale(rebin_from)
        dst = _parse_scale(rebin_to)
        if dst.levels != scale.levels:
            raise UsageError(
                f"--rebin-to {dst.levels} must match the model scale "
                f"{scale.levels}"
            )
        table = parse_ratings(path, fmt, scale=src)
        return dataclasses.replace(
            table, ratings=rebin_scale(table.ratings, src, dst), scale=dst
        )
    try:
        return parse_ratings(path, fmt, scale=scale)
    except ValueError as exc:
        raise UsageError(
            f"{exc}; the model scale is {scale.levels} -- if the data "
            f"lives on a different scale pass --rebin-from/--rebin-to"
        ) from exc


def _split_for_training(settings: Settings, scale: RatingScale):
    """(train, val, test) tables for cmd_train from --data/--split."""
    data = settings.get("data")
    if data is None:
        raise UsageError("--data is required")
    seed = settings.get("seed", 0, int)
    split = settings.get("split", "random")
    fraction = settings.get("fraction", 0.2, float)
    val_fraction = settings.get("val_fraction", 0.1, float)
    if data != "synthetic" and Path(data).is_dir():
        base = Path(data) / f"{split}.base"
        test_file = Path(data) / f"{split}.test"
        for p in (base, test_file):
            if not p.exists():
                raise UsageError(f"split file {p} does not exist")
        fmt = settings.get("format", "movielens-tab")
        base_table, test = canonical_split(
            None, "file-pair", base_path=base, test_path=test_file,
            fmt=fmt, scale=scale,
        )
        train_table, val = canonical_split(
            base_table, "random", fraction=val_fraction, seed=seed
        )
        return train_table, val, test
    table = _load_data_table(settings, scale)
    train_table, test, val = canonical_split(
        table, "random", fraction=fraction, seed=seed,
        val_fraction=val_fraction,
    )
    return train_table, val, test


def _model_config(settings: Settings, scale: RatingScale) -> ModelConfig:
    arch = settings.get("arch", "self-supervised")
    if arch in ("ss", "self-supervised"):
        base = ModelConfig.self_supervised_default(levels=scale.n_levels)
        widths = settings.get("widths", None, _parse_widths)
        if widths is not None:
            depth = len(widths)
            base = dataclasses.replace(
                base, widths=widths,
                dropout_placement=frozenset(
                    k for k in base.dropout_placement if k < depth
                ),
            )
    elif arch == "fea":
        base = ModelConfig.fea_default(levels=scale.n_levels)
        enc = settings.get("encoder_widths", None, _parse_widths)
        dec = settings.get("decoder_widths", None, _parse_widths)
        if enc is not None:
            base = dataclasses.replace(base, encoder_widths=enc,
                                       factor_size=enc[-1])
        if dec is not None:
            base = dataclasses.replace(
                base, decoder_widths=dec,
                dropout_placement=frozenset(
                    k for k in base.dropout_placement if k < len(dec)
                ),
            )
    else:
        raise UsageError(f"unknown architecture {arch!r}")
    rate = settings.get("dropout_rate", None, float)
    if rate is not None:
        base = dataclasses.replace(base, dropout_rate=rate)
    mask = settings.get("mask_prob", None, float)
    if mask is not None:
        base = dataclasses.replace(base, mask_prob=mask)
    return base


def _train_config(settings: Settings) -> TrainConfig:
    return TrainConfig(
        epochs=settings.get("epochs", 100, int),
        optimizer=settings.get("optimizer", "adam"),
        learning_rate=settings.get("learning_rate", 1e-3, float),
        cell_budget=settings.get("budget", 20_000, int),
        sampler=settings.get("sampler", "uniform"),
        seed=settings.get("seed", 0, int),
        patience=settings.get("patience", 20, int),
        precision=settings.get("precision", "float32"),
    )


def cmd_train(args: argparse.Namespace) -> int:
    settings = Settings(args)
    scale = FIVE_STAR
    rebin_to = settings.get("rebin_to")
    if rebin_to is not None:
        scale = _parse_scale(rebin_to)
    train_table, val, test = _split_for_training(settings, scale)
    scale = train_table.scale
    model_config = _model_config(settings, scale)
    out = _out_dir(settings)
    report_file = open(out / "report.jsonl", "w") if out else None
    epochs = settings.get("epochs", 100, int)
    seed = settings.get("seed", 0, int)
    try:
        if epochs == 0:
            params = init_params(model_config, seed=seed)
            metadata = {"seed": seed, "epochs_run": 0, "best_epoch": 0,
                        "best_val_rmse": None}
            final = {"command": "train", "epochs_run": 0}
        else:
            train_config = _train_config(settings)
            report, params = train(model_config, train_config, train_table,
                                   val)
            for rec in report.records():
                _emit(dict(rec, command="train"), report_file)
            metadata = {
                "seed": seed,
                "epochs_run": report.epochs_run,
                "best_epoch": report.best_epoch,
                "best_val_rmse": report.best_val_rmse,
            }
            final = {
                "command": "train",
                "epochs_run": report.epochs_run,
                "best_epoch": report.best_epoch,
                "val_rmse": report.best_val_rmse,
                "wall_clock_seconds": round(report.wall_clock_seconds, 3),
                "diverged": report.diverged,
            }
        if test is not None and test.n_ratings:
            final["test_rmse"] = evaluate(model_config, params, train_table,
                                          test).rmse
        if out is not None:
            ckpt = out / "model.exchk"
            save_checkpoint(ckpt, model_config, params, scale, metadata)
            final["checkpoint"] = str(ckpt)
        _emit(final, report_file)
    finally:
        if report_file is not None:
            report_file.close()
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    settings = Settings(args)
    ck = load_checkpoint(args.checkpoint)
    table = _load_data_table(settings, ck.scale, density=0.3)
    seed = settings.get("seed", 0, int)
    mode = settings.get("mode", "interpolate")
    if mode not in ("interpolate", "extrapolate"):
        raise UsageError(f"unknown mode {mode!r}")
    fractions_text = settings.get("observed_fraction", "0.8")
    fractions = [float(x) for x in str(fractions_text).split(",")]
    out = _out_dir(settings)
    metrics_file = open(out / "metrics.jsonl", "w") if out else None
    try:
        rng = np.random.default_rng(seed)
        order = rng.permutation(table.n_ratings)
        for p in fractions:
            if not 0.0 < p < 1.0:
                raise UsageError(f"observed fraction {p} not inside (0, 1)")
            n_ctx = max(1, int(round(p * table.n_ratings)))
            if n_ctx >= table.n_ratings:
                raise UsageError(
                    f"observed fraction {p} leaves no query cells"
                )
            context = table.subset(np.sort(order[:n_ctx]))
            query = table.subset(np.sort(order[n_ctx:]))
            report = evaluate(ck.config, ck.params, context, query)
            _emit(
                {
                    "command": "evaluate",
                    "mode": mode,
                    "observed_fraction": p,
                    "n_context": context.n_ratings,
                    "n_query": query.n_ratings,
                    "rmse": report.rmse,
                },
                metrics_file,
            )
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return 0


def cmd_factorize(args: argparse.Namespace) -> int:
    settings = Settings(args)
    ck = load_checkpoint(args.checkpoint)
    if ck.config.architecture != "fea":
        raise UsageError(
            "no factors defined for a self-supervised checkpoint; "
            "factorize needs an autoencoder (fea) model"
        )
    from .models import fea_encode

    table = _load_data_table(settings, ck.scale)
    factors = fea_encode(encode_onehot(table), ck.config, ck.params)
    out = _out_dir(settings) or Path(".")
    rows_file = out / "factors_rows.tsv"
    cols_file = out / "factors_cols.tsv"
    for path, ids, z in (
        (rows_file, table.users, factors.z_rows),
        (cols_file, table.items, factors.z_cols),
    ):
        with open(path, "w") as fh:
            fh.write("id\t" + "\t".join(
                f"z{j}" for j in range(z.shape[1])) + "\n")
            for ext_id, vec in zip(ids, np.asarray(z)):
                fh.write(str(ext_id) + "\t"
                         + "\t".join(repr(float(x)) for x in vec) + "\n")
    _emit(
        {
            "command": "factorize",
            "rows": len(table.users),
            "cols": len(table.items),
            "factor_size": int(np.asarray(factors.z_rows).shape[1]),
            "rows_file": str(rows_file),
            "cols_file": str(cols_file),
        },
        None,
    )
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    settings = Settings(args)
    dims = tuple(int(x) for x in args.dims.split(","))
    seed = settings.get("seed", 0, int)
    trials = settings.get("trials", 50, int)
    report = run_verifier_suite(dims, trials=trials, seed=seed)
    out = _out_dir(settings)
    report_file = open(out / "verify.jsonl", "w") if out else None
    try:
        _emit(dict(report, command="verify"), report_file)
    finally:
        if report_file is not None:
            report_file.close()
    return 0 if report["passed"] else 1


def cmd_sample_check(args: argparse.Namespace) -> int:
    settings = Settings(args)
    table = _load_data_table(settings, FIVE_STAR)
    t = encode_onehot(table)
    sampler = settings.get("sampler", "uniform")
    budget = settings.get("budget", 20_000, int)
    trials = settings.get("trials", 100, int)
    seed = settings.get("seed", 0, int)
    out = _out_dir(settings)
    report_file = open(out / "sample_check.jsonl", "w") if out else None
    try:
        n = t.indices.shape[0]
        if trials == 0:
            _emit({"command": "sample-check", "sampler": sampler,
                   "trials": 0, "records": 0}, report_file)
            return 0
        if sampler == "uniform":
            if budget > n:
                raise UsageError(
                    f"budget {budget} exceeds the {n} observed cells"
                )
            counts = np.zeros(n)
            all_keys = np.ravel_multi_index(tuple(t.indices.T), t.dims)
            for k in range(trials):
                batch = uniform_subsample(t, budget, seed=seed + k)
                keys = np.ravel_multi_index(tuple(batch.indices.T), t.dims)
                counts += np.isin(all_keys, keys)
            expected = budget / n
            sigma = np.sqrt(expected * (1 - expected) / trials)
            dev = np.abs(counts / trials - expected)
            max_sigma = float(dev.max() / sigma) if sigma > 0 else 0.0
            # family-wise bound: max of n near-binomial z-scores
            threshold = float(norm.ppf(1 - 0.005 / n))
            record = {
                "command": "sample-check",
                "sampler": "uniform",
                "trials": trials,
                "budget": budget,
                "cells": int(n),
                "expected_frequency": expected,
                "max_deviation_sigma": max_sigma,
                "sigma_threshold": threshold,
                "passed": bool(max_sigma <= threshold),
            }
        elif sampler == "conditional":
            if t.ndim != 2:
                raise UsageError("conditional sampler works on matrices")
            marginal = row_marginal(t)
            n_rows = t.dims[0]
            counts = np.zeros(n_rows)
            for k in range(trials):
                batch = conditional_subsample(t, 1, 1, seed=seed + k)
                counts[np.unique(batch.indices[:, 0])] += 1
            freq = counts / trials
            sigma = np.sqrt(marginal * (1 - marginal) / trials)
            dev = np.abs(freq - marginal)
            with np.errstate(divide="ignore", invalid="ignore"):
                sigmas = np.where(sigma > 0, dev / sigma, 0.0)
            threshold = float(norm.ppf(1 - 0.005 / n_rows))
            record = {
                "command": "sample-check",
                "sampler": "conditional",
                "trials": trials,
                "rows": int(n_rows),
                "max_deviation_sigma": float(sigmas.max()),
                "sigma_threshold": threshold,
                "passed": bool(sigmas.max() <= threshold),
            }
        else:
            raise UsageError(f"unknown sampler {sampler!r}")
        _emit(record, report_file)
        return 0 if record["passed"] else 1
    finally:
        if report_file is not None:
            report_file.close()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exchtensor",
        description="Permutation-equivariant matrix and tensor completion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None,
                       help="output directory for files")

    p_train = sub.add_parser("train", help="fit a model and write a checkpoint")
    common(p_train)
    p_train.add_argument("--arch", choices=["self-supervised", "ss", "fea"],
                         default=None)
    p_train.add_argument("--data", default=None,
                         help="ratings file, split directory, or 'synthetic'")
    p_train.add_argument("--format",
                         choices=["movielens-tab", "csv-triples"],
                         default=None)
    p_train.add_argument("--split", default=None,
                         help="random, or a file-pair prefix such as u1")
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--budget", type=int, default=None,
                         help="minibatch cell budget")
    p_train.add_argument("--sampler", choices=["uniform", "conditional"],
                         default=None)
    p_train.add_argument("--observed-fraction", dest="observed_fraction",
                         default=None, help="synthetic data density")
    p_train.add_argument("--rebin-from", dest="rebin_from", default=None)
    p_train.add_argument("--rebin-to", dest="rebin_to", default=None)

    p_eval = sub.add_parser("evaluate",
                            help="RMSE of a checkpoint on held-out cells")
    common(p_eval)
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--data", default=None)
    p_eval.add_argument("--format",
                        choices=["movielens-tab", "csv-triples"],
                        default=None)
    p_eval.add_argument("--mode", choices=["interpolate", "extrapolate"],
                        default=None)
    p_eval.add_argument("--observed-fraction", dest="observed_fraction",
                        default=None,
                        help="fraction treated as observed; comma list sweeps")
    p_eval.add_argument("--rebin-from", dest="rebin_from", default=None)
    p_eval.add_argument("--rebin-to", dest="rebin_to", default=None)

    p_fact = sub.add_parser("factorize",
                            help="write row/column factors of an fea model")
    common(p_fact)
    p_fact.add_argument("checkpoint")
    p_fact.add_argument("--data", default=None)
    p_fact.add_argument("--format",
                        choices=["movielens-tab", "csv-triples"],
                        default=None)
    p_fact.add_argument("--observed-fraction", dest="observed_fraction",
                        default=None)

    p_verify = sub.add_parser("verify",
                              help="equivariance and orbit checks for a shape")
    common(p_verify)
    p_verify.add_argument("--dims", required=True,
                          help="comma-separated axis sizes, e.g. 3,4")
    p_verify.add_argument("--trials", type=int, default=None)

    p_sample = sub.add_parser("sample-check",
                              help="empirical sampler frequency report")
    common(p_sample)
    p_sample.add_argument("--data", default=None)
    p_sample.add_argument("--format",
                          choices=["movielens-tab", "csv-triples"],
                          default=None)
    p_sample.add_argument("--sampler", choices=["uniform", "conditional"],
                          default=None)
    p_sample.add_argument("--budget", type=int, default=None)
    p_sample.add_argument("--trials", type=int, default=None)
    p_sample.add_argument("--observed-fraction", dest="observed_fraction",
                          default=None)
    return parser


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "factorize": cmd_factorize,
    "verify": cmd_verify,
    "sample-check": cmd_sample_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
