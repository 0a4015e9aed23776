"""Forecast evaluation, imputation, outlier detection and decomposition reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy.stats import rankdata

from shaftformer.dataset import DatasetSplit, VibrationRecord, mask_runs
from shaftformer.errors import ConfigMismatch, InsufficientContext, InvalidArgument, ShapeMismatch
from shaftformer.inference import (
    SCORINGS,
    Drawer,
    anomaly_scores,
    as_model,
    forecast_paths,
    one_step_predictions,
    rollout_ssf,
)
from shaftformer.spectral import stl_decompose
from shaftformer.training import window_mse
from shaftformer.windows import context_samples, make_windows


def _table_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalTable:
    mse: dict
    per_record: list  # (split, record_id, mse)
    split_seed: int
    domain: str

    def to_csv(self) -> str:
        rows = [(s, "__all__", repr(v)) for s, v in self.mse.items()]
        rows += [(s, rid, repr(v)) for s, rid, v in self.per_record]
        return _table_csv(["split", "record_id", "mse"], rows)


def record_mse(model, record: VibrationRecord) -> float:
    """Teacher-forced MSE of the predictive mean over one record's target windows."""
    cfg = model.cfg
    stride = cfg.tgt_len if cfg.variant == "SF" else cfg.tgt_frames
    return float(window_mse(model, make_windows([record], cfg, stride)).mean())


def evaluate(checkpoint, split: DatasetSplit) -> EvalTable:
    """Per-split and per-record MSE in the checkpoint's loss domain.

    A split's value is the mean over its records, so a duplicated record
    counts twice. Empty splits report NaN.
    """
    if split.seed != checkpoint.split_seed:
        raise ConfigMismatch(f"split seed {split.seed} differs from the checkpoint's {checkpoint.split_seed}")
    model = checkpoint.build()
    domain = "time" if model.cfg.variant == "SF" else "frequency"
    per_record, mse = [], {}
    for name, records in split.buckets().items():
        values = [record_mse(model, r) for r in records]
        per_record += [(name, r.record_id, v) for r, v in zip(records, values)]
        mse[name] = float(np.mean(values)) if values else float("nan")
    return EvalTable(mse, per_record, split.seed, domain)


def forecast_windows(records, cfg, horizon: int, stride: int | None = None, first: int | None = None):
    """Histories and true continuations at evenly spaced forecast points.

    Forecasts start at ``first`` (default: the model's context length) and
    every ``stride`` samples after it, so two models with different contexts
    can be scored on the same targets by passing a common ``first``.
    Returns ``(histories [B, C], truths [B, horizon], conditions, origins)``
    where ``origins`` is the absolute index of each history's first sample.
    """
    C = context_samples(cfg)
    first = C if first is None else first
    if first < C:
        raise InsufficientContext(f"forecasts from sample {first} lack the {C}-sample context")
    stride = stride or horizon
    hist, truth, conds, origins = [], [], [], []
    for rec in records:
        x = rec.samples
        for s in range(first, len(x) - horizon + 1, stride):
            if not rec.observed[s - C : s + horizon].all():
                continue
            hist.append(x[s - C : s])
            truth.append(x[s : s + horizon])
            conds.append(rec.condition)
            origins.append(s - C)
    if not hist:
        raise InsufficientContext("no record is long enough for one forecast window")
    return np.array(hist), np.array(truth), conds, np.array(origins)


def forecast_mse(checkpoint, records, horizon: int, stride: int | None = None, first: int | None = None) -> float:
    """Time-domain MSE of the mean rollout over ``horizon`` samples."""
    model = as_model(checkpoint)
    hist, truth, conds, origins = forecast_windows(records, model.cfg, horizon, stride, first)
    fs = records[0].sample_rate_hz
    pred = forecast_paths(model, hist, conds, fs, horizon, Drawer(deterministic=True), origins=origins)
    return float(np.mean((pred - truth) ** 2))


def persistence_mse(records, cfg, horizon: int, stride: int | None = None, first: int | None = None) -> float:
    """Time-domain MSE of repeating the last observed sample."""
    hist, truth, _, _ = forecast_windows(records, cfg, horizon, stride, first)
    return float(np.mean((hist[:, -1:] - truth) ** 2))


@torch.no_grad()
def frame_forecast_mse(checkpoint, records) -> tuple[float, float]:
    """SSF mean rollout of ``tgt_frames`` frames versus last-frame repetition.

    Both errors are measured on scaled spectrogram channels over the same
    non-overlapping target windows. Returns ``(model_mse, persistence_mse)``.
    """
    model = as_model(checkpoint)
    cfg = model.cfg
    if cfg.variant != "SSF":
        raise InvalidArgument("frame forecasts need an SSF model")
    w = make_windows(records, cfg, cfg.tgt_frames)
    pred, _ = rollout_ssf(model, w.src, w.features, w.reference, cfg.tgt_frames, Drawer(deterministic=True))
    model_mse = torch.mean((pred - w.target) ** 2).item()
    persistence = torch.mean((w.src[..., -1:] - w.target) ** 2).item()
    return model_mse, persistence


# ---------------------------------------------------------------------------
# imputation


def linear_interpolation(record: VibrationRecord) -> np.ndarray:
    obs = record.observed
    idx = np.arange(len(record))
    return np.interp(idx, idx[obs], record.samples[obs])


def impute(checkpoint, record: VibrationRecord, passes: int = 1) -> VibrationRecord:
    """Fill every masked run of ``record`` from its observed past.

    The first pass rolls the predictive mean forward across each gap, left to
    right, so later gaps see earlier fills as context. Every further pass
    replaces the fills with rolling one-step predictions computed on the
    previously filled record. Observed samples are returned untouched and the
    mask is kept.
    """
    if passes < 1:
        raise InvalidArgument("passes must be positive")
    runs = mask_runs(record.observed)
    if not runs:
        raise InvalidArgument("record has no masked samples to impute")
    model = as_model(checkpoint)
    C = context_samples(model.cfg)
    if runs[0][0] < C:
        raise InsufficientContext(f"first gap starts at sample {runs[0][0]}; {C} observed samples needed")
    x = np.array(record.samples)
    draw = Drawer(deterministic=True)
    for a, b in runs:
        x[a:b] = forecast_paths(model, x[None, a - C : a], [record.condition], record.sample_rate_hz,
                                b - a, draw, origins=[a - C])[0]
    for _ in range(passes - 1):
        mean, _ = one_step_predictions(model, replace(record, samples=x, mask=None))
        for a, b in runs:
            x[a:b] = mean[a:b]
    obs = record.observed
    x[obs] = record.samples[obs]
    return replace(record, samples=x)


# ---------------------------------------------------------------------------
# outlier detection


@dataclass
class AnomalyReport:
    scores: np.ndarray
    flags: np.ndarray
    threshold: float
    scoring: str
    offset: int = 0  # record index of scores[0]

    def __post_init__(self):
        if self.scores.shape != self.flags.shape:
            raise ShapeMismatch("scores and flags differ in length")

    def to_csv(self) -> str:
        rows = [(self.offset + i, repr(float(s)), int(f)) for i, (s, f) in enumerate(zip(self.scores, self.flags))]
        return f"# scoring={self.scoring};threshold={self.threshold!r}\n" + _table_csv(
            ["index", "score", "flag"], rows
        )


def detect_outliers(checkpoint, record: VibrationRecord, threshold: float | None = None,
                    scoring: str = "nll") -> AnomalyReport:
    """Flag samples whose one-step predictive score exceeds ``threshold``.

    ``threshold`` defaults to the calibrated validation percentile stored in
    the checkpoint.
    """
    if scoring not in SCORINGS:
        raise InvalidArgument(f"scoring must be one of {SCORINGS}")
    calib = getattr(checkpoint, "calibration", {}) or {}
    if threshold is None:
        key = f"{scoring}_threshold"
        if key not in calib:
            raise InvalidArgument(f"no calibrated {scoring} threshold; pass one explicitly")
        threshold = calib[key]
    scores, offset = anomaly_scores(as_model(checkpoint), record, scoring, calib.get("residual_var"))
    return AnomalyReport(scores, scores > threshold, float(threshold), scoring, offset)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by the rank-sum identity (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgument("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# decomposition


@dataclass
class DecompositionReport:
    columns: dict = field(default_factory=dict)
    period: int = 0

    def to_csv(self) -> str:
        names = list(self.columns)
        n = len(next(iter(self.columns.values())))
        rows = [[i] + [repr(float(self.columns[k][i])) for k in names] for i in range(n)]
        return f"# period={self.period}\n" + _table_csv(["index"] + names, rows)


def decompose_report(true_signal, predicted_signal, period: int, loess_span: int = 7) -> DecompositionReport:
    """Side-by-side STL panels (signal, trend, seasonal, residual) of truth and prediction."""
    a = np.asarray(true_signal, dtype=np.float64).reshape(-1)
    b = np.asarray(predicted_signal, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ShapeMismatch(f"true has {a.size} samples, predicted has {b.size}")
    cols = {}
    for tag, x in (("true", a), ("pred", b)):
        parts = stl_decompose(x, period, loess_span)
        cols[f"{tag}_signal"] = x
        cols[f"{tag}_trend"] = parts.trend
        cols[f"{tag}_seasonal"] = parts.seasonal
        cols[f"{tag}_residual"] = parts.residual
    return DecompositionReport(cols, int(period))
