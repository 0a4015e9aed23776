"""SF and SSF architectures.

SF works on raw time samples; SSF works on STFT frames laid out as a
row-major ``[F, T]`` token grid (token index ``f * T + t``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from shaftformer.attention import (
    AttentionConfig,
    HiLoAttention,
    MultiHeadAttention,
    TokenGrid,
    causal_mask,
    frame_causal_mask,
    positional_encoding,
)
from shaftformer.dataset import N_CONDITION_FEATURES, TestCondition, condition_features
from shaftformer.errors import InvalidArgument, InvalidConfig, ShapeMismatch
from shaftformer.spectral import Spectrogram, is_cola

VARIANTS = ("SF", "SSF")
LAMBDA_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "SSF"
    d_model: int = 32
    n_encoder_layers: int = 2
    n_decoder_layers: int = 1
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    d_ff: int = 64
    elt_kernel: int = 5
    elt_layers: int = 2
    freq_resolution: int = 2
    time_resolution: int = 16
    window: str = "hann"
    mean_kernel: int = 5
    variance_kernel: int = 5
    dropout: float = 0.0
    use_positional_encoding: bool = True
    noise_std: float = 0.05
    time_compression: int = 2
    use_reference: bool = True
    src_len: int = 128
    tgt_len: int = 16
    src_frames: int = 8
    tgt_frames: int = 4

    def __post_init__(self):
        if isinstance(self.attention, dict):
            object.__setattr__(self, "attention", AttentionConfig(**self.attention))
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.attention.d_model != self.d_model:
            object.__setattr__(self, "attention", replace(self.attention, d_model=self.d_model))
        for name in ("elt_kernel", "mean_kernel", "variance_kernel"):
            k = getattr(self, name)
            if k < 3 or k % 2 == 0:
                raise InvalidConfig(f"{name} must be odd and >= 3, got {k}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("d_model", "n_encoder_layers", "n_decoder_layers", "d_ff", "elt_layers",
                     "freq_resolution", "time_resolution", "time_compression", "src_len",
                     "tgt_len", "src_frames", "tgt_frames"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.noise_std < 0:
            raise InvalidConfig("noise_std must be non-negative")
        if self.d_model % 2:
            raise InvalidConfig("d_model must be even")
        if self.variant == "SF" and self.src_len < 2**self.n_encoder_layers:
            raise InvalidConfig(
                f"{self.n_encoder_layers} distilling layers exhaust a {self.src_len}-sample source"
            )
        if self.variant == "SSF" and not is_cola(self.window, self.frame_len, self.hop):
            raise InvalidConfig(f"{self.window} window, frame {self.frame_len}, hop {self.hop} is not COLA")

    @property
    def hop(self) -> int:
        return self.time_resolution

    @property
    def frame_len(self) -> int:
        return self.freq_resolution * self.time_resolution

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def memory_len(self) -> int:
        return math.ceil(self.src_len / 2**self.n_encoder_layers)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PredictiveParams:
    """Per-element mean and rate of the stochastic output head.

    For SSF ``lam`` is the rate of the exponential prior on the variance. For
    SF the variance is predicted directly and stored as ``lam = 1 / var``, so
    ``1 / lam`` is the expected variance in both cases.
    """

    mu: torch.Tensor
    lam: torch.Tensor
    variance_model: str = "exponential"

    def __post_init__(self):
        if self.mu.shape != self.lam.shape:
            raise ShapeMismatch(f"mu {tuple(self.mu.shape)} vs lam {tuple(self.lam.shape)}")

    @property
    def mean_variance(self):
        return 1.0 / self.lam


@dataclass
class ConditioningBundle:
    features: torch.Tensor  # [B, N_CONDITION_FEATURES]
    reference: torch.Tensor | None = None  # [B, 2, F, T] scaled reference frames

    @classmethod
    def from_conditions(cls, conditions, reference=None):
        feats = np.stack([condition_features(c) for c in conditions])
        return cls(torch.as_tensor(feats, dtype=torch.get_default_dtype()), reference)


def sample_variance(lam, u):
    """Inverse-CDF draw from Exp(lam): ``-ln(1 - u) / lam``."""
    return -torch.log1p(-u) / lam


def sample_head(params: PredictiveParams, u, eps):
    """Reparameterized draw ``z = mu + sqrt(sigma2) * eps``.

    ``sigma2 = -ln(1 - u) / lam`` for the exponential head; the SF head uses
    ``sigma2 = 1 / lam`` and ignores ``u``. The square root is split as
    ``sqrt(-ln(1 - u)) * lam**-0.5`` so ``u = 0`` gives ``z = mu`` exactly
    with finite gradients.
    """
    if u is not None and u.shape != params.mu.shape:
        raise ShapeMismatch(f"u {tuple(u.shape)} vs params {tuple(params.mu.shape)}")
    if eps.shape != params.mu.shape:
        raise ShapeMismatch(f"eps {tuple(eps.shape)} vs params {tuple(params.mu.shape)}")
    if params.variance_model == "exponential":
        scale = torch.sqrt(-torch.log1p(-u)) * torch.rsqrt(params.lam)
    else:
        scale = torch.rsqrt(params.lam)
    return params.mu + scale * eps


def draw_sample(params: PredictiveParams, generator=None):
    u = torch.rand(params.mu.shape, generator=generator, dtype=params.mu.dtype)
    eps = torch.randn(params.mu.shape, generator=generator, dtype=params.mu.dtype)
    return sample_head(params, u, eps)


def frequency_filter(tokens, gains_raw, grid_shape):
    """Scale every token of frequency row ``f`` by ``sigmoid(gains_raw[f])``."""
    Fg, Tg = grid_shape
    if gains_raw.shape != (Fg,):
        raise ShapeMismatch(f"{gains_raw.shape[0]} gains for {Fg} frequency rows")
    if tokens.shape[1] != Fg * Tg:
        raise ShapeMismatch(f"grid {grid_shape} does not tile {tokens.shape[1]} tokens")
    g = torch.sigmoid(gains_raw).repeat_interleave(Tg)
    return tokens * g.unsqueeze(-1)


def _dropout(p):
    return nn.Dropout(p) if p > 0 else nn.Identity()


def _positivity(x):
    return F.softplus(x) + LAMBDA_FLOOR


class ELTEmbedding(nn.Module):
    """Convolutional lift of each (channel, row) series to ``d_model / n_channels`` features.

    Input ``[B, C, R, T]``. Every channel-row pair owns its own kernels. The
    per-channel features are concatenated to ``d_model`` per (row, time)
    token; the condition embedding and, optionally, a sinusoidal time encoding
    are added.
    """

    def __init__(self, n_channels, n_rows, d_model, kernel, n_layers=2, causal=False,
                 use_positional_encoding=True):
        super().__init__()
        if d_model % n_channels:
            raise InvalidConfig(f"d_model={d_model} not divisible by {n_channels} channels")
        self.n_channels, self.n_rows, self.d_model = n_channels, n_rows, d_model
        self.kernel, self.causal = kernel, causal
        self.use_positional_encoding = use_positional_encoding
        groups = n_channels * n_rows
        width = groups * (d_model // n_channels)
        self.convs = nn.ModuleList(
            [nn.Conv1d(groups if i == 0 else width, width, kernel, groups=groups) for i in range(n_layers)]
        )
        self.condition = nn.Linear(N_CONDITION_FEATURES, d_model)

    def _pad(self, x):
        k = self.kernel
        return F.pad(x, (k - 1, 0) if self.causal else (k // 2, k // 2))

    def forward(self, x, features):
        B, C, R, T = x.shape
        if (C, R) != (self.n_channels, self.n_rows):
            raise ShapeMismatch(f"expected {self.n_channels} channels x {self.n_rows} rows, got {C} x {R}")
        h = x.reshape(B, C * R, T)
        for i, conv in enumerate(self.convs):
            h = conv(self._pad(h))
            if i < len(self.convs) - 1:
                h = F.gelu(h)
        h = h.view(B, C, R, self.d_model // C, T).permute(0, 2, 4, 1, 3).reshape(B, R, T, self.d_model)
        h = h + self.condition(features)[:, None, None, :]
        if self.use_positional_encoding:
            h = h + positional_encoding(T, self.d_model).to(h.dtype)
        return h.reshape(B, R * T, self.d_model)


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ff, dropout):
        super().__init__()
        self.lin1 = nn.Linear(d_model, d_ff)
        self.lin2 = nn.Linear(d_ff, d_model)
        self.drop = _dropout(dropout)

    def forward(self, x):
        return self.lin2(self.drop(F.gelu(self.lin1(x))))


class DistillingEncoderLayer(nn.Module):
    """ProbSparse self-attention followed by a conv block that halves the sequence.

    The attention output is duplicated; one copy goes through a strided
    down-sampling conv and a transposed up-sampling conv, is concatenated with
    the untouched copy, fused by a conv, and max-pooled with stride 2.
    """

    def __init__(self, cfg: ModelConfig, sample_seed=0):
        super().__init__()
        d = cfg.d_model
        a = cfg.attention
        self.attn = MultiHeadAttention(d, a.n_heads, sparse=True, factor=a.probsparse_factor,
                                       sample_factor=a.sample_factor, key_stride=max(1, a.hi_dilation),
                                       sample_seed=sample_seed)
        self.norm = nn.LayerNorm(d)
        self.drop = _dropout(cfg.dropout)
        self.down = nn.Conv1d(d, d, 3, stride=2, padding=1)
        self.up = nn.ConvTranspose1d(d, d, 4, stride=2, padding=1)
        self.fuse = nn.Conv1d(2 * d, d, 3, padding=1)

    def forward(self, x):
        L = x.shape[1]
        a = self.norm(x + self.drop(self.attn(x)))
        h = a.transpose(1, 2)
        r = self.up(F.gelu(self.down(h)))[..., :L]
        y = F.elu(self.fuse(torch.cat([h, r], dim=1)))
        return F.max_pool1d(y, 3, stride=2, padding=1).transpose(1, 2)


class SpectralEncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, sample_seed=0):
        super().__init__()
        self.attn = HiLoAttention(cfg.attention, sample_seed=sample_seed)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.drop = _dropout(cfg.dropout)

    def forward(self, x, grid_shape):
        x = self.norm1(x + self.drop(self.attn(x, grid_shape)))
        return self.norm2(x + self.drop(self.ff(x)))


class DecoderLayer(nn.Module):
    """Post-norm transformer decoder layer with dense attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h = cfg.d_model, cfg.attention.n_heads
        self.self_attn = MultiHeadAttention(d, h)
        self.cross_attn = MultiHeadAttention(d, h)
        self.ff = FeedForward(d, cfg.d_ff, cfg.dropout)
        self.norm1, self.norm2, self.norm3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.drop = _dropout(cfg.dropout)

    def forward(self, x, memory, self_mask):
        x = self.norm1(x + self.drop(self.self_attn(x, mask=self_mask)))
        x = self.norm2(x + self.drop(self.cross_attn(x, memory)))
        return self.norm3(x + self.drop(self.ff(x)))


class ShaftFormer(nn.Module):
    """Time-domain forecaster: ELT, distilling ProbSparse encoder, vanilla decoder, Gaussian head."""

    variance_model = "gaussian"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.variant != "SF":
            raise InvalidConfig("ShaftFormer needs variant='SF'")
        self.cfg = cfg
        pe = cfg.use_positional_encoding
        self.embed_src = ELTEmbedding(1, 1, cfg.d_model, cfg.elt_kernel, cfg.elt_layers, False, pe)
        self.embed_tgt = ELTEmbedding(1, 1, cfg.d_model, cfg.elt_kernel, cfg.elt_layers, True, pe)
        self.encoder = nn.ModuleList(
            [DistillingEncoderLayer(cfg, sample_seed=i) for i in range(cfg.n_encoder_layers)]
        )
        self.decoder = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.n_decoder_layers)])
        self.mu_head = nn.Linear(cfg.d_model, 1)
        self.var_head = nn.Linear(cfg.d_model, 1)

    def encode(self, src, features):
        """``src [B, L]`` -> memory ``[B, ceil(L / 2**layers), d]``."""
        if src.shape[1] < 2 ** len(self.encoder):
            raise InvalidConfig("distilling layers exhaust the source sequence")
        x = self.embed_src(src[:, None, None, :], features)
        for layer in self.encoder:
            x = layer(x)
        return x

    def decode(self, memory, dec_in, features):
        """Teacher-forced decoding of ``dec_in [B, Lt]`` (targets shifted right by one)."""
        if self.training and self.cfg.noise_std > 0:
            dec_in = dec_in + self.cfg.noise_std * torch.randn_like(dec_in)
        x = self.embed_tgt(dec_in[:, None, None, :], features)
        mask = causal_mask(x.shape[1])
        for layer in self.decoder:
            x = layer(x, memory, mask)
        var = _positivity(self.var_head(x)).squeeze(-1)
        return PredictiveParams(self.mu_head(x).squeeze(-1), 1.0 / var, "gaussian")

    def forward(self, src, dec_in, features, reference=None):
        return self.decode(self.encode(src, features), dec_in, features)


class SpectralShaftFormer(nn.Module):
    """Spectral forecaster over ``[2, F, T]`` scaled STFT frames."""

    variance_model = "exponential"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.variant != "SSF":
            raise InvalidConfig("SpectralShaftFormer needs variant='SSF'")
        self.cfg = cfg
        Fb, d, pe = cfg.n_bins, cfg.d_model, cfg.use_positional_encoding
        self.embed_src = ELTEmbedding(2, Fb, d, cfg.elt_kernel, cfg.elt_layers, False, pe)
        self.embed_tgt = ELTEmbedding(2, Fb, d, cfg.elt_kernel, cfg.elt_layers, True, pe)
        self.encoder = nn.ModuleList(
            [SpectralEncoderLayer(cfg, sample_seed=i) for i in range(cfg.n_encoder_layers)]
        )
        self.decoder = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.n_decoder_layers)])
        self.feature_proj = nn.Linear(N_CONDITION_FEATURES, d)
        self.reference_proj = nn.Linear(2, d, bias=False) if cfg.use_reference else None
        self.gains_raw = nn.Parameter(torch.full((Fb,), 3.0))
        self.mean_conv = nn.Conv1d(d, 2, cfg.mean_kernel, padding=cfg.mean_kernel // 2)
        self.var_conv = nn.Conv1d(d, 2, cfg.variance_kernel, padding=cfg.variance_kernel // 2)

    def _check_frames(self, x, name):
        if x.dim() != 4 or x.shape[1] != 2 or x.shape[2] != self.cfg.n_bins:
            raise ShapeMismatch(f"{name} must be [B, 2, {self.cfg.n_bins}, T], got {tuple(x.shape)}")

    def encode(self, src, features):
        self._check_frames(src, "src")
        grid = (src.shape[2], src.shape[3])
        x = self.embed_src(src, features)
        for layer in self.encoder:
            x = layer(x, grid)
        return x

    def compress_memory(self, memory, n_frames):
        tc = self.cfg.time_compression
        if tc == 1:
            return memory
        B, L, d = memory.shape
        img = memory.transpose(1, 2).reshape(B, d, L // n_frames, n_frames)
        img = F.avg_pool2d(img, (1, tc), (1, tc), ceil_mode=True)
        return img.flatten(2).transpose(1, 2)

    def decode(self, memory, dec_in, features, reference=None, n_src_frames=None):
        self._check_frames(dec_in, "dec_in")
        B, _, Fb, Tt = dec_in.shape
        if self.reference_proj is not None:
            if reference is None:
                raise InvalidArgument("this model is conditioned on a reference spectrogram")
            if reference.shape != dec_in.shape:
                raise ShapeMismatch(f"reference {tuple(reference.shape)} vs target {tuple(dec_in.shape)}")
        n_src_frames = n_src_frames or memory.shape[1] // Fb
        mem = self.compress_memory(memory, n_src_frames)
        x = self.embed_tgt(dec_in, features)
        mask = frame_causal_mask(Fb, Tt)
        for layer in self.decoder:
            x = layer(x, mem, mask)
        x = x + self.feature_proj(features)[:, None, :]
        if self.reference_proj is not None:
            x = x + self.reference_proj(reference.permute(0, 2, 3, 1).reshape(B, Fb * Tt, 2))
        x = frequency_filter(x, self.gains_raw, (Fb, Tt))
        # convolve along frequency, independently per frame
        cols = x.view(B, Fb, Tt, -1).permute(0, 2, 3, 1).reshape(B * Tt, -1, Fb)
        mu = self.mean_conv(cols).view(B, Tt, 2, Fb).permute(0, 2, 3, 1)
        lam = _positivity(self.var_conv(cols)).view(B, Tt, 2, Fb).permute(0, 2, 3, 1)
        return PredictiveParams(mu, lam, "exponential")

    def forward(self, src, dec_in, features, reference=None):
        return self.decode(self.encode(src, features), dec_in, features, reference, src.shape[3])


def build_model(cfg: ModelConfig) -> nn.Module:
    return ShaftFormer(cfg) if cfg.variant == "SF" else SpectralShaftFormer(cfg)


# ---------------------------------------------------------------------------
# functional entry points


def _as_frames(window):
    if isinstance(window, Spectrogram):
        return torch.as_tensor(window.stacked(), dtype=torch.get_default_dtype())[None]
    x = torch.as_tensor(np.asarray(window), dtype=torch.get_default_dtype())
    if x.dim() == 1:
        return x[None, None, None, :]
    return x


def elt_embed(window, condition: TestCondition, cfg: ModelConfig, weights: ELTEmbedding) -> TokenGrid:
    """Embed a time window (SF) or spectrogram slab (SSF) into tokens."""
    x = _as_frames(window)
    feats = ConditioningBundle.from_conditions([condition]).features.expand(x.shape[0], -1)
    tokens = weights(x, feats)
    grid = (x.shape[2], x.shape[3]) if cfg.variant == "SSF" else None
    return TokenGrid(tokens, grid)


def encode_sf(tokens: TokenGrid, cfg: ModelConfig, weights: ShaftFormer) -> TokenGrid:
    if cfg.variant != "SF":
        raise InvalidConfig("encode_sf needs an SF config")
    x = tokens.tokens
    if x.shape[1] < 2 ** len(weights.encoder):
        raise InvalidConfig("distilling layers exhaust the source sequence")
    for layer in weights.encoder:
        x = layer(x)
    return TokenGrid(x)


def encode_ssf(tokens: TokenGrid, cfg: ModelConfig, weights: SpectralShaftFormer) -> TokenGrid:
    if cfg.variant != "SSF":
        raise InvalidConfig("encode_ssf needs an SSF config")
    if tokens.grid_shape is None:
        raise InvalidArgument("SSF encoding needs a grid shape")
    x = tokens.tokens
    for layer in weights.encoder:
        x = layer(x, tokens.grid_shape)
    return TokenGrid(x, tokens.grid_shape)


def decode(memory: TokenGrid, target_prefix, bundle: ConditioningBundle, cfg: ModelConfig,
           weights) -> PredictiveParams:
    """``target_prefix``: ``[B, Lt]`` samples (SF) or ``[B, 2, F, Tt]`` frames (SSF)."""
    if cfg.variant == "SF":
        return weights.decode(memory.tokens, target_prefix, bundle.features)
    n_src = memory.grid_shape[1] if memory.grid_shape else None
    return weights.decode(memory.tokens, target_prefix, bundle.features, bundle.reference, n_src)
