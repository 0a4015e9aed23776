"""Autoregressive rollouts, one-step predictive densities and anomaly scores.

Everything here runs under ``torch.no_grad`` on a model in eval mode. Public
entry points accept either a :class:`ModelCheckpoint` or a built model.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch

from shaftformer.checkpoint import ModelCheckpoint
from shaftformer.dataset import VibrationRecord
from shaftformer.errors import InsufficientContext, InvalidArgument
from shaftformer.model import PredictiveParams, sample_head
from shaftformer.spectral import get_window, spec_scale
from shaftformer.windows import context_samples, features_tensor, reference_frames, scaled_frames

SCORINGS = ("nll", "z_score")
DEFAULT_LEVELS = (0.05, 0.5, 0.95)


def as_model(source) -> torch.nn.Module:
    if isinstance(source, ModelCheckpoint):
        return source.build()
    source.eval()
    return source


class Drawer:
    """Turns the predictive parameters of one step into the value fed back.

    ``deterministic`` returns the mean; otherwise a reparameterized sample is
    drawn from ``generator``.
    """

    def __init__(self, generator: torch.Generator | None = None, deterministic: bool = False):
        self.generator = generator
        self.deterministic = deterministic

    def __call__(self, params: PredictiveParams):
        if self.deterministic:
            return params.mu
        u = torch.rand(params.mu.shape, generator=self.generator, dtype=params.mu.dtype)
        eps = torch.randn(params.mu.shape, generator=self.generator, dtype=params.mu.dtype)
        return sample_head(params, u, eps)


def _last(params: PredictiveParams, frames: bool) -> PredictiveParams:
    sl = (Ellipsis, slice(-1, None)) if frames else (slice(None), slice(-1, None))
    return PredictiveParams(params.mu[sl], params.lam[sl], params.variance_model)


@torch.no_grad()
def rollout_sf(model, context, features, horizon: int, draw: Drawer):
    """Generate ``horizon`` samples after ``context [B, >= src_len]``.

    Generation runs in blocks of ``tgt_len`` steps; each block re-encodes the
    latest ``src_len`` values, including earlier generated ones.
    Returns ``(values, lam)`` both ``[B, horizon]``.
    """
    cfg = model.cfg
    ctx = context
    vals, lams = [], []
    done = 0
    while done < horizon:
        memory = model.encode(ctx[:, -cfg.src_len :], features)
        dec = ctx[:, -1:]
        for _ in range(min(cfg.tgt_len, horizon - done)):
            step = _last(model.decode(memory, dec, features), frames=False)
            dec = torch.cat([dec, draw(step)], dim=1)
            lams.append(step.lam)
        new = dec[:, 1:]
        vals.append(new)
        ctx = torch.cat([ctx, new], dim=1)
        done += new.shape[1]
    if not vals:
        empty = context.new_zeros((context.shape[0], 0))
        return empty, empty
    return torch.cat(vals, dim=1), torch.cat(lams, dim=1)


@torch.no_grad()
def rollout_ssf(model, frames, features, reference, n_frames: int, draw: Drawer):
    """Generate ``n_frames`` scaled frames after ``frames [B, 2, F, >= src_frames]``.

    ``reference`` holds the template frames for the generated positions.
    Returns ``(frames, lam)`` both ``[B, 2, F, n_frames]``.
    """
    cfg = model.cfg
    Ts = cfg.src_frames
    ctx = frames
    vals, lams = [], []
    done = 0
    while done < n_frames:
        memory = model.encode(ctx[..., -Ts:], features)
        dec = ctx[..., -1:]
        for _ in range(min(cfg.tgt_frames, n_frames - done)):
            ref = None if reference is None else reference[..., done : done + dec.shape[-1]]
            step = _last(model.decode(memory, dec, features, ref, Ts), frames=True)
            dec = torch.cat([dec, draw(step)], dim=-1)
            lams.append(step.lam)
        new = dec[..., 1:]
        vals.append(new)
        ctx = torch.cat([ctx, new], dim=-1)
        done += new.shape[-1]
    return torch.cat(vals, dim=-1), torch.cat(lams, dim=-1)


def _synthesis_bases(frame_len: int, n_bins: int):
    """Matrices mapping real and imaginary bins to inverse-FFT samples."""
    eye = np.eye(n_bins)
    return np.fft.irfft(eye, n=frame_len, axis=1).T, np.fft.irfft(1j * eye, n=frame_len, axis=1).T


def frames_to_time(mu, var, cfg, start: int, length: int):
    """Weighted overlap-add of scaled frames into samples ``[start, start + length)``.

    ``mu`` and ``var`` are ``[B, 2, F, m]`` arrays of per-bin means and
    variances (``var`` may be None). Frame ``j`` starts at sample ``j * hop``.
    Bins are treated as independent when propagating variance.
    """
    B, _, Fb, m = mu.shape
    L, hop = cfg.frame_len, cfg.hop
    w = get_window(cfg.window, L)
    scale = spec_scale(L, cfg.window)
    Cb, Sb = _synthesis_bases(L, Fb)
    n = (m - 1) * hop + L
    acc = np.zeros((B, n))
    vacc = np.zeros((B, n))
    norm = np.zeros(n)
    for j in range(m):
        seg = slice(j * hop, j * hop + L)
        acc[:, seg] += (mu[:, 0, :, j] @ Cb.T + mu[:, 1, :, j] @ Sb.T) / scale * w
        if var is not None:
            vacc[:, seg] += (var[:, 0, :, j] @ (Cb**2).T + var[:, 1, :, j] @ (Sb**2).T) / scale**2 * w**2
        norm[seg] += w**2
    sl = slice(start, start + length)
    if norm[sl].size < length or np.any(norm[sl] <= 0):
        raise InvalidArgument("requested samples are not covered by the frames")
    mean = acc[:, sl] / norm[sl]
    return mean, (vacc[:, sl] / norm[sl] ** 2 if var is not None else None)


def _ssf_frames_needed(cfg, horizon):
    return (context_samples(cfg) + horizon - 1) // cfg.hop - cfg.src_frames + 1


@torch.no_grad()
def forecast_paths(model, histories, conditions, sample_rate_hz, horizon: int, draw: Drawer,
                   origins=None, with_variance: bool = False):
    """Time-domain continuation of each row of ``histories [B, N]``.

    Only the last ``context_samples`` of every row are used. ``origins`` gives
    the absolute index of each row's first sample (aligns reference templates).
    Returns ``[B, horizon]`` values, plus per-sample predictive variance when
    ``with_variance``.
    """
    cfg = model.cfg
    histories = np.asarray(histories, dtype=np.float64)
    B, N = histories.shape
    C = context_samples(cfg)
    if N < C:
        raise InsufficientContext(f"history of {N} samples, model needs {C}")
    if not np.all(np.isfinite(histories[:, -C:])):
        raise InsufficientContext("the last context window contains missing samples")
    origins = np.zeros(B, dtype=np.int64) if origins is None else np.asarray(origins)
    feats = features_tensor(conditions)
    if horizon == 0:
        empty = np.zeros((B, 0))
        return (empty, empty) if with_variance else empty
    if cfg.variant == "SF":
        vals, lam = rollout_sf(model, torch.as_tensor(histories[:, -C:]), feats, horizon, draw)
        vals = vals.numpy()
        return (vals, 1.0 / lam.numpy()) if with_variance else vals
    hist = histories[:, -C:]
    first = origins + (N - C)
    m = _ssf_frames_needed(cfg, horizon)
    frames = torch.as_tensor(np.stack([scaled_frames(h, cfg) for h in hist]))
    ref = None
    if cfg.use_reference:
        ref = torch.as_tensor(np.stack([
            reference_frames(c, cfg, sample_rate_hz, int(o) + cfg.src_frames * cfg.hop, m)
            for c, o in zip(conditions, first)
        ]))
    out, lam = rollout_ssf(model, frames, feats, ref, m, draw)
    var = (1.0 / lam).numpy() if with_variance else None
    mean, v = frames_to_time(out.numpy(), var, cfg, cfg.frame_len - cfg.hop, horizon)
    return (mean, v) if with_variance else mean


@dataclass
class Forecast:
    mean: np.ndarray
    quantiles: np.ndarray  # [len(levels), horizon]
    levels: tuple
    samples: np.ndarray  # [n_samples, horizon]

    @property
    def horizon(self) -> int:
        return self.mean.size

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(["step", "mean"] + [f"q{lv:g}" for lv in self.levels]) + "\n")
        for i in range(self.horizon):
            row = [str(i), repr(float(self.mean[i]))] + [repr(float(q)) for q in self.quantiles[:, i]]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()


def forecast(checkpoint, history: VibrationRecord, horizon: int, n_samples: int = 100, seed: int = 0,
             levels=DEFAULT_LEVELS, deterministic: bool = False) -> Forecast:
    """Sample ``n_samples`` trajectories of ``horizon`` steps after ``history``.

    ``deterministic`` feeds back the predictive mean (every ``u`` forced to 0).
    """
    if horizon < 0:
        raise InvalidArgument("horizon must be non-negative")
    if n_samples < 1:
        raise InvalidArgument("n_samples must be positive")
    levels = tuple(float(q) for q in levels)
    if any(not 0.0 <= q <= 1.0 for q in levels):
        raise InvalidArgument("quantile levels must lie in [0, 1]")
    model = as_model(checkpoint)
    C = context_samples(model.cfg)
    if len(history) < C:
        raise InvalidArgument(f"history of {len(history)} samples is shorter than the {C}-sample context")
    gen = torch.Generator().manual_seed(int(seed))
    hist = np.repeat(history.samples[None, -C:], n_samples, axis=0)
    origin = len(history) - C
    paths = forecast_paths(model, hist, [history.condition] * n_samples, history.sample_rate_hz,
                           horizon, Drawer(gen, deterministic), origins=np.full(n_samples, origin))
    quant = np.quantile(paths, levels, axis=0) if horizon else np.zeros((len(levels), 0))
    return Forecast(paths.mean(axis=0), quant, levels, paths)


# ---------------------------------------------------------------------------
# one-step predictive densities


@torch.no_grad()
def one_step_predictions(model, record: VibrationRecord):
    """Per-sample predictive mean and variance from rolling short-range forecasts.

    SF predicts each sample from the true past (teacher forcing). SSF predicts
    one hop of samples at a time from the true past through the spectrogram.
    Samples inside the first context window have no prediction (NaN).
    """
    model = as_model(model)
    cfg = model.cfg
    if not record.observed.all():
        raise InvalidArgument("scoring needs a fully observed record")
    x = record.samples
    n = len(x)
    C = context_samples(cfg)
    step = cfg.tgt_len if cfg.variant == "SF" else cfg.hop
    if n < C + 1:
        raise InsufficientContext(f"record of {n} samples, need at least {C + 1}")
    mean = np.full(n, np.nan)
    var = np.full(n, np.nan)
    starts = list(range(C, n, step))
    if cfg.variant == "SF":
        feats = features_tensor([record.condition])
        Lt = cfg.tgt_len
        s_list = [min(s, n - Lt) for s in starts]
        src = torch.as_tensor(np.stack([x[s - C : s] for s in s_list]))
        dec = torch.as_tensor(np.stack([x[s - 1 : s - 1 + Lt] for s in s_list]))
        params = model(src, dec, feats.expand(len(s_list), -1))
        for i, s in enumerate(s_list):
            mean[s : s + Lt] = params.mu[i].numpy()
            var[s : s + Lt] = 1.0 / params.lam[i].numpy()
        return mean, var
    hist = np.stack([x[s - C : s] for s in starts])
    m, v = forecast_paths(model, hist, [record.condition] * len(starts), record.sample_rate_hz, step,
                          Drawer(deterministic=True), origins=np.array(starts) - C, with_variance=True)
    for i, s in enumerate(starts):
        k = min(step, n - s)
        mean[s : s + k] = m[i, :k]
        var[s : s + k] = v[i, :k]
    return mean, var


def gaussian_nll(x, mean, var):
    return 0.5 * np.log(2 * np.pi * var) + (x - mean) ** 2 / (2 * var)


def anomaly_scores(model, record: VibrationRecord, scoring: str = "nll", residual_var: float | None = None):
    """Scores for every predicted sample and the index of the first one."""
    if scoring not in SCORINGS:
        raise InvalidArgument(f"scoring must be one of {SCORINGS}")
    mean, var = one_step_predictions(model, record)
    offset = context_samples(as_model(model).cfg)
    x, mean, var = record.samples[offset:], mean[offset:], var[offset:]
    if scoring == "nll":
        return gaussian_nll(x, mean, var), offset
    if residual_var is None or not residual_var > 0:
        raise InvalidArgument("z_score scoring needs a positive residual variance")
    return (x - mean) ** 2 / residual_var, offset


def calibrate_thresholds(model, records, percentile: float = 99.0) -> dict:
    """Default detection thresholds from scores on (clean) validation records."""
    model = as_model(model)
    resid, nll = [], []
    for rec in records:
        mean, var = one_step_predictions(model, rec)
        ok = np.isfinite(mean)
        resid.append(rec.samples[ok] - mean[ok])
        nll.append(gaussian_nll(rec.samples[ok], mean[ok], var[ok]))
    resid = np.concatenate(resid)
    residual_var = float(np.mean(resid**2))
    return {
        "percentile": percentile,
        "residual_var": residual_var,
        "nll_threshold": float(np.percentile(np.concatenate(nll), percentile)),
        "z_score_threshold": float(np.percentile(resid**2 / residual_var, percentile)),
    }
