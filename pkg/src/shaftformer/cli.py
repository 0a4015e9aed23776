"""Command-line entry point: ``shaftformer <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or invariant error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from shaftformer.checkpoint import ModelCheckpoint
from shaftformer.dataset import (
    atomic_write,
    mask_gaps,
    read_records,
    split_dataset,
    synth_dataset,
    write_records,
)
from shaftformer.errors import InvalidArgument, ShaftFormerError
from shaftformer.model import ModelConfig

USAGE_ERROR = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidArgument(f"cannot read config {path}: {exc}") from exc
    unknown = set(cfg) - {"model", "train", "synth", "split"}
    if unknown:
        raise InvalidArgument(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _configs(args):
    from shaftformer.training import TrainConfig

    cfg = _load_config(args.config)
    model = ModelConfig.from_dict(cfg.get("model", {}))
    if getattr(args, "variant", None):
        model = replace(model, variant=args.variant)
    train = TrainConfig.from_dict(cfg.get("train", {}))
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "epochs", None):
        train = replace(train, max_epochs=args.epochs)
    return model, train, cfg


def _split(args, cfg, seed=None):
    records = read_records(args.data)
    split_cfg = cfg.get("split", {})
    seed = split_cfg.get("seed", 0) if seed is None else seed
    return split_dataset(records, tuple(split_cfg.get("ratios", (0.7, 0.2, 0.1))), seed)


def _out(args, name) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _write(args, name, text):
    path = _out(args, name)
    atomic_write(path, text)
    print(path)


def _find(records, record_id):
    if record_id is None:
        return records[0]
    for r in records:
        if r.record_id == record_id:
            return r
    raise InvalidArgument(f"no record with id {record_id!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = _load_config(args.config).get("synth", {})
    params = {"n_records": 48, "duration_s": 16.0, "sample_rate_hz": 64.0, "noise_std": 0.1, **cfg}
    for key in ("n_records", "duration_s", "sample_rate_hz", "noise_std"):
        if getattr(args, key) is not None:
            params[key] = getattr(args, key)
    records = synth_dataset(seed=args.seed or 0, **params)
    if args.mask_fraction:
        records = [mask_gaps(r, args.mask_fraction, 1, (args.seed or 0) * 7919 + i, protect_head=args.protect_head)
                   for i, r in enumerate(records)]
    path = _out(args, f"records.{args.format}")
    write_records(records, path, args.format)
    print(path)


def cmd_train(args):
    from shaftformer.training import history_csv, train

    model_cfg, train_cfg, cfg = _configs(args)
    split = _split(args, cfg)

    def log(h):
        if args.verbose:
            print(f"epoch {h.epoch} train {h.train_loss:.6g} val {h.val_loss:.6g}", file=sys.stderr)

    result = train(model_cfg, train_cfg, split, log=log)
    path = result.checkpoint.save(_out(args, "checkpoint.bin"))
    print(path)
    _write(args, "history.csv", history_csv(result.history))


def cmd_forecast(args):
    from shaftformer.inference import forecast

    ckpt = ModelCheckpoint.load(args.checkpoint)
    record = _find(read_records(args.data), args.record_id)
    if args.history is not None:
        record = replace(record, samples=record.samples[: args.history],
                         mask=None if record.mask is None else record.mask[: args.history])
    fc = forecast(ckpt, record, args.horizon, args.n_samples, args.seed or 0, deterministic=args.deterministic)
    _write(args, "forecast.csv", fc.to_csv())


def cmd_impute(args):
    from shaftformer.tasks import impute

    ckpt = ModelCheckpoint.load(args.checkpoint)
    records = read_records(args.data)
    if args.record_id is not None:
        records = [_find(records, args.record_id)]
    filled = [impute(ckpt, r, args.passes) for r in records if not r.observed.all()]
    if not filled:
        raise InvalidArgument("no record has masked samples")
    path = _out(args, "imputed.csv")
    write_records(filled, path, "csv")
    print(path)


def cmd_detect(args):
    from shaftformer.tasks import detect_outliers

    ckpt = ModelCheckpoint.load(args.checkpoint)
    record = _find(read_records(args.data), args.record_id)
    report = detect_outliers(ckpt, record, args.threshold, args.scoring)
    _write(args, "anomalies.csv", report.to_csv())
    print(f"{int(report.flags.sum())} of {report.flags.size} samples flagged", file=sys.stderr)


def cmd_evaluate(args):
    from shaftformer.tasks import evaluate

    ckpt = ModelCheckpoint.load(args.checkpoint)
    _, _, cfg = _configs(args)
    seed = ckpt.split_seed if args.seed is None else args.seed
    table = evaluate(ckpt, _split(args, cfg, seed))
    _write(args, "evaluation.csv", table.to_csv())
    for name, v in table.mse.items():
        print(f"{name} mse {v:.6g}", file=sys.stderr)


def _read_series(path):
    try:
        return np.loadtxt(path, delimiter=",", ndmin=1, comments="#")
    except (OSError, ValueError) as exc:
        raise InvalidArgument(f"cannot read numeric series from {path}: {exc}") from exc


def cmd_decompose(args):
    from shaftformer.tasks import decompose_report

    report = decompose_report(_read_series(args.true), _read_series(args.pred), args.period, args.loess_span)
    _write(args, "decomposition.csv", report.to_csv())


def cmd_gradcheck(args):
    from shaftformer.training import GRADIENT_BLOCKS, gradient_check

    blocks = sorted(GRADIENT_BLOCKS) if args.block == "all" else [args.block]
    rows, failed = ["block,max_rel_error,passed"], []
    for name in blocks:
        err = gradient_check(name, args.trials, args.seed or 0)
        ok = err < args.tolerance
        rows.append(f"{name},{err!r},{int(ok)}")
        print(f"{name:24s} {err:.3e} {'ok' if ok else 'FAIL'}", file=sys.stderr)
        if not ok:
            failed.append(name)
    _write(args, "gradcheck.csv", "\n".join(rows) + "\n")
    return 3 if failed else 0


def cmd_search(args):
    from shaftformer.training import SearchSpace, hyperparameter_search, sweep_csv

    model_cfg, train_cfg, cfg = _configs(args)
    if args.epochs is None:
        train_cfg = replace(train_cfg, max_epochs=5, early_stop_patience=5, window_stride=4)
    space = SearchSpace.table4() if args.space == "table4" else SearchSpace.desk()
    trials = hyperparameter_search(space, args.budget, _split(args, cfg), args.seed or 0, model_cfg, train_cfg)
    _write(args, "sweep.csv", sweep_csv(trials))


def cmd_ablate_pe(args):
    from shaftformer.training import train

    model_cfg, train_cfg, cfg = _configs(args)
    split = _split(args, cfg)
    rows = ["use_positional_encoding,best_val_loss,epochs"]
    losses = {}
    for flag in (True, False):
        res = train(replace(model_cfg, use_positional_encoding=flag), train_cfg, split, calibrate=False)
        losses[flag] = res.best_val_loss
        rows.append(f"{int(flag)},{res.best_val_loss!r},{len(res.history)}")
    rel = abs(losses[True] - losses[False]) / min(losses[True], losses[False])
    print(f"relative difference {rel:.3%}", file=sys.stderr)
    _write(args, "ablation.csv", "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, defaults):
        def d(value):
            return value if defaults else argparse.SUPPRESS

        parser.add_argument("--config", default=d(None),
                            help="JSON file with 'model', 'train', 'synth' and 'split' sections")
        parser.add_argument("--seed", type=int, default=d(None))
        parser.add_argument("--out", default=d("."), help="output directory")

    # flags may come before or after the command; the command-level copy
    # must not overwrite values given earlier with its defaults
    common = _Parser(add_help=False)
    global_flags(common, defaults=False)
    p = _Parser(prog="shaftformer", description="Spectral transformer forecasting for axle vibration signals.")
    global_flags(p, defaults=True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic dataset")
    sp.add_argument("--n-records", dest="n_records", type=int)
    sp.add_argument("--duration", dest="duration_s", type=float)
    sp.add_argument("--fs", dest="sample_rate_hz", type=float)
    sp.add_argument("--noise", dest="noise_std", type=float)
    sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    sp.add_argument("--mask-fraction", type=float, default=0.0, help="hide one contiguous gap per record")
    sp.add_argument("--protect-head", type=int, default=160, help="samples never masked at the start")

    def data_args(sp):
        sp.add_argument("--data", required=True, help="records file (csv or jsonl)")

    def ckpt_args(sp):
        sp.add_argument("--checkpoint", required=True)
        data_args(sp)
        sp.add_argument("--record-id")

    sp = add("train", cmd_train, "train a model")
    data_args(sp)
    sp.add_argument("--variant", choices=("SF", "SSF"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--verbose", action="store_true")

    sp = add("forecast", cmd_forecast, "sample forecasts after a record")
    ckpt_args(sp)
    sp.add_argument("--horizon", type=int, required=True)
    sp.add_argument("--n-samples", type=int, default=100)
    sp.add_argument("--history", type=int, help="use only the first N samples as history")
    sp.add_argument("--deterministic", action="store_true", help="feed back the predictive mean")

    sp = add("impute", cmd_impute, "fill masked gaps")
    ckpt_args(sp)
    sp.add_argument("--passes", type=int, default=1)

    sp = add("detect", cmd_detect, "flag outlying samples")
    ckpt_args(sp)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--scoring", choices=("nll", "z_score"), default="nll")

    sp = add("evaluate", cmd_evaluate, "teacher-forced MSE per split")
    ckpt_args(sp)

    sp = add("decompose", cmd_decompose, "STL panels of a true and a predicted series")
    sp.add_argument("--true", required=True, help="numeric series, one value per line")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--period", type=int, required=True)
    sp.add_argument("--loess-span", type=int, default=7)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    sp.add_argument("--block", default="all")
    sp.add_argument("--trials", type=int, default=3)
    sp.add_argument("--tolerance", type=float, default=1e-3)

    sp = add("search", cmd_search, "random hyperparameter search")
    data_args(sp)
    sp.add_argument("--budget", type=int, default=20)
    sp.add_argument("--space", choices=("desk", "table4"), default="desk")
    sp.add_argument("--variant", choices=("SF", "SSF"))
    sp.add_argument("--epochs", type=int)

    sp = add("ablate-pe", cmd_ablate_pe, "train with and without positional encoding")
    data_args(sp)
    sp.add_argument("--variant", choices=("SF", "SSF"))
    sp.add_argument("--epochs", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_default_dtype(torch.float64)
    try:
        code = args.func(args)
    except ShaftFormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
