"""Slicing records into teacher-forced (source, decoder input, target) windows.

SF windows are raw sample slices. SSF windows are slabs of STFT frames scaled
by ``spec_scale`` so a unit-variance white signal gives unit-variance channels.
In both cases the decoder input is the target shifted right by one step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from shaftformer.dataset import TestCondition, VibrationRecord, condition_features, reference_template
from shaftformer.errors import InvalidArgument
from shaftformer.model import ModelConfig
from shaftformer.spectral import spec_scale, stft


@dataclass
class WindowBatch:
    src: torch.Tensor
    dec_in: torch.Tensor
    target: torch.Tensor
    features: torch.Tensor
    reference: torch.Tensor | None
    record_index: np.ndarray
    starts: np.ndarray

    def __len__(self):
        return self.src.shape[0]

    def subset(self, idx) -> "WindowBatch":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        ref = None if self.reference is None else self.reference[idx]
        return WindowBatch(self.src[idx], self.dec_in[idx], self.target[idx], self.features[idx], ref,
                           self.record_index[idx.numpy()], self.starts[idx.numpy()])


def scaled_frames(signal, cfg: ModelConfig) -> np.ndarray:
    """``[2, F, T]`` scaled STFT of a finite signal."""
    spec = stft(signal, cfg.frame_len, cfg.hop, cfg.window)
    return spec.stacked() * spec_scale(cfg.frame_len, cfg.window)


def frame_observed(mask: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """True for frames whose every sample is observed."""
    n_frames = 1 + (mask.size - cfg.frame_len) // cfg.hop
    return np.array([mask[j * cfg.hop : j * cfg.hop + cfg.frame_len].all() for j in range(n_frames)])


def reference_frames(condition: TestCondition, cfg: ModelConfig, sample_rate_hz: float,
                     start_sample: int, n_frames: int) -> np.ndarray:
    """Scaled template frames, the first one starting at absolute sample ``start_sample``."""
    n = (n_frames - 1) * cfg.hop + cfg.frame_len
    tpl = reference_template(condition, n, sample_rate_hz, start=start_sample)
    return scaled_frames(tpl, cfg)


def features_tensor(conditions) -> torch.Tensor:
    return torch.as_tensor(np.stack([condition_features(c) for c in conditions]),
                           dtype=torch.float64)


def context_samples(cfg: ModelConfig) -> int:
    """Observed history needed before the first predicted sample."""
    if cfg.variant == "SF":
        return cfg.src_len
    return (cfg.src_frames - 1) * cfg.hop + cfg.frame_len


def _sf_windows(record, cfg, stride):
    x = np.nan_to_num(record.samples)
    obs = record.observed
    Ls, Lt = cfg.src_len, cfg.tgt_len
    src, dec, tgt, starts = [], [], [], []
    for s in range(0, len(record) - Ls - Lt + 1, stride):
        if not obs[s : s + Ls + Lt].all():
            continue
        src.append(x[s : s + Ls])
        dec.append(x[s + Ls - 1 : s + Ls + Lt - 1])
        tgt.append(x[s + Ls : s + Ls + Lt])
        starts.append(s)
    return src, dec, tgt, None, starts


def _ssf_windows(record, cfg, stride):
    if len(record) < cfg.frame_len:
        return [], [], [], [], []
    frames = scaled_frames(np.nan_to_num(record.samples), cfg)
    ok = frame_observed(record.observed, cfg)
    T = frames.shape[2]
    Ts, Tt = cfg.src_frames, cfg.tgt_frames
    ref_all = reference_frames(record.condition, cfg, record.sample_rate_hz, 0, T) if cfg.use_reference else None
    src, dec, tgt, ref, starts = [], [], [], [], []
    for j in range(0, T - Ts - Tt + 1, stride):
        if not ok[j : j + Ts + Tt].all():
            continue
        src.append(frames[:, :, j : j + Ts])
        dec.append(frames[:, :, j + Ts - 1 : j + Ts + Tt - 1])
        tgt.append(frames[:, :, j + Ts : j + Ts + Tt])
        if ref_all is not None:
            ref.append(ref_all[:, :, j + Ts : j + Ts + Tt])
        starts.append(j)
    return src, dec, tgt, ref, starts


def make_windows(records, cfg: ModelConfig, stride: int = 1) -> WindowBatch:
    """All fully observed windows of ``records`` at the given start stride."""
    if stride < 1:
        raise InvalidArgument("stride must be positive")
    build = _sf_windows if cfg.variant == "SF" else _ssf_windows
    cols = {k: [] for k in ("src", "dec", "tgt", "ref", "feat", "rec", "start")}
    for i, rec in enumerate(records):
        src, dec, tgt, ref, starts = build(rec, cfg, stride)
        cols["src"] += src
        cols["dec"] += dec
        cols["tgt"] += tgt
        cols["ref"] += ref or []
        cols["feat"] += [condition_features(rec.condition)] * len(starts)
        cols["rec"] += [i] * len(starts)
        cols["start"] += starts
    if not cols["src"]:
        raise InvalidArgument("no complete window fits the given records")
    dt = torch.float64

    def t(key):
        return torch.as_tensor(np.stack(cols[key]), dtype=dt)

    ref = t("ref") if cols["ref"] else None
    return WindowBatch(t("src"), t("dec"), t("tgt"), t("feat"), ref,
                       np.asarray(cols["rec"]), np.asarray(cols["start"]))


def record_for(records, batch: WindowBatch, i: int) -> VibrationRecord:
    return records[int(batch.record_index[i])]
