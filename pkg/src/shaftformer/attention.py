"""Attention primitives: dense softmax attention, ProbSparse, HiLo and positional encodings.

Masks are boolean and ``True`` where a query may attend to a key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from shaftformer.errors import InvalidArgument, InvalidConfig, ShapeMismatch


def _check_qkv(q, k, v, mask):
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if mask is not None and tuple(mask.shape[-2:]) != (q.shape[-2], k.shape[-2]):
        raise ShapeMismatch(f"mask shape {tuple(mask.shape)} != ({q.shape[-2]}, {k.shape[-2]})")


def full_attention(q, k, v, mask=None, return_weights=False):
    """softmax(q k^T / sqrt(d)) v over the last two dimensions."""
    _check_qkv(q, k, v, mask)
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def n_top_queries(L_Q: int, c: float) -> int:
    if L_Q < 1:
        raise InvalidArgument("need at least one query")
    return max(1, min(L_Q, math.ceil(c * math.log(L_Q))))


def n_sampled_keys(L_K: int, sample_factor: float = 5.0) -> int:
    return max(1, min(L_K, math.ceil(sample_factor * math.log(L_K)))) if L_K > 1 else 1


def sample_key_indices(L_K: int, n: int, seed=None) -> torch.Tensor:
    """Sorted key subset; drawn from the global RNG when ``seed`` is None."""
    g = None
    if seed is not None:
        g = torch.Generator().manual_seed(int(seed))
    idx = torch.randperm(L_K, generator=g)[:n]
    return idx.sort().values


def sparsity_measure(q, k, key_index, mask=None):
    """max minus mean of scaled dot products over the sampled keys."""
    ks = k.index_select(-2, key_index)
    s = q @ ks.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is None:
        return s.amax(-1) - s.mean(-1)
    m = mask.index_select(-1, key_index).expand_as(s)
    cnt = m.sum(-1)
    top = s.masked_fill(~m, float("-inf")).amax(-1)
    mean = s.masked_fill(~m, 0.0).sum(-1) / cnt.clamp(min=1)
    return torch.where(cnt > 0, top - mean, torch.full_like(top, float("-inf")))


def probsparse_attention(q, k, v, c: float = 5.0, seed=None, mask=None, sample_factor: float = 5.0,
                         key_stride: int = 1, return_index: bool = False):
    """Sparse attention: only the top-u queries by sparsity measure get exact attention.

    ``u = max(1, min(L_Q, ceil(c ln L_Q)))``. Every other query row receives the
    mean of ``v`` (restricted to its allowed keys when ``mask`` is given).
    ``key_stride > 1`` keeps every ``key_stride``-th key before anything else.
    """
    if key_stride > 1:
        k, v = k[..., ::key_stride, :], v[..., ::key_stride, :]
        if mask is not None:
            mask = mask[..., ::key_stride]
    _check_qkv(q, k, v, mask)
    L_Q, L_K = q.shape[-2], k.shape[-2]
    u = n_top_queries(L_Q, c)
    key_index = sample_key_indices(L_K, n_sampled_keys(L_K, sample_factor), seed)
    with torch.no_grad():
        measure = sparsity_measure(q, k, key_index, mask)
        top = measure.topk(u, dim=-1).indices.sort(dim=-1).values
    batch = q.shape[:-2]
    q_sel = q.gather(-2, top.unsqueeze(-1).expand(*batch, u, q.shape[-1]))
    m_sel = None
    if mask is not None:
        m_full = mask.expand(*batch, L_Q, L_K)
        m_sel = m_full.gather(-2, top.unsqueeze(-1).expand(*batch, u, L_K))
    out_sel = full_attention(q_sel, k, v.expand(*batch, L_K, v.shape[-1]), m_sel)
    if mask is None:
        base = v.mean(-2, keepdim=True).expand(*batch, L_Q, v.shape[-1])
    else:
        w = m_full.to(v.dtype)
        base = (w @ v) / w.sum(-1, keepdim=True).clamp(min=1)
    out = base.scatter(-2, top.unsqueeze(-1).expand(*batch, u, v.shape[-1]), out_sel)
    return (out, top) if return_index else out


def positional_encoding(L: int, d_model: int) -> torch.Tensor:
    """Sinusoidal table ``[L, d_model]``: sin on even columns, cos on odd."""
    if d_model % 2:
        raise InvalidArgument(f"d_model must be even, got {d_model}")
    if L < 1:
        raise InvalidArgument("L must be positive")
    pos = torch.arange(L, dtype=torch.float64).unsqueeze(1)
    div = torch.pow(10000.0, torch.arange(0, d_model, 2, dtype=torch.float64) / d_model)
    pe = torch.zeros(L, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos / div)
    pe[:, 1::2] = torch.cos(pos / div)
    return pe.to(torch.get_default_dtype())


def causal_mask(L: int) -> torch.Tensor:
    return torch.ones(L, L, dtype=torch.bool).tril()


def frame_causal_mask(n_rows: int, n_frames: int) -> torch.Tensor:
    """Causal mask for row-major ``[n_rows, n_frames]`` token grids: attend to frames <= own."""
    t = torch.arange(n_frames).repeat(n_rows)
    return t.unsqueeze(0) <= t.unsqueeze(1)


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 32
    n_heads_hi: int = 1
    n_heads_lo: int = 1
    probsparse_factor: float = 5.0
    lo_pool_kernel: int = 3
    lo_pool_stride: int = 2
    hi_dilation: int = 1
    lo_dilation: int = 1
    sample_factor: float = 5.0

    def __post_init__(self):
        heads = self.n_heads_hi + self.n_heads_lo
        if self.n_heads_hi < 0 or self.n_heads_lo < 0 or heads < 1:
            raise InvalidConfig("need at least one attention head")
        if self.d_model < 1 or self.d_model % heads:
            raise InvalidConfig(f"d_model={self.d_model} not divisible by {heads} heads")
        if self.probsparse_factor <= 0:
            raise InvalidConfig("probsparse_factor must be positive")
        if self.lo_pool_kernel < 1 or self.lo_pool_stride < 1:
            raise InvalidConfig("pooling kernel and stride must be >= 1")

    @property
    def n_heads(self):
        return self.n_heads_hi + self.n_heads_lo

    @property
    def d_head(self):
        return self.d_model // self.n_heads


@dataclass
class TokenGrid:
    """Token matrix ``[B, L, d_model]``; ``grid_shape=(F, T)`` when tokens tile a spectrogram."""

    tokens: torch.Tensor
    grid_shape: tuple | None = None

    def __post_init__(self):
        if self.tokens.dim() == 2:
            self.tokens = self.tokens.unsqueeze(0)
        if self.tokens.shape[1] < 1:
            raise InvalidArgument("token grid must contain at least one token")
        if self.grid_shape is not None:
            self.grid_shape = tuple(int(s) for s in self.grid_shape)
            if self.grid_shape[0] * self.grid_shape[1] != self.tokens.shape[1]:
                raise ShapeMismatch(f"grid {self.grid_shape} does not tile {self.tokens.shape[1]} tokens")


def _split_heads(x, n_heads):
    B, L, _ = x.shape
    return x.view(B, L, n_heads, -1).transpose(1, 2)


def _merge_heads(x):
    B, H, L, dh = x.shape
    return x.transpose(1, 2).reshape(B, L, H * dh)


class MultiHeadAttention(nn.Module):
    """Projected multi-head attention using either dense or ProbSparse kernels.

    In eval mode ProbSparse draws its key subset from ``sample_seed`` so that
    inference is repeatable; in training mode it draws from the global RNG.
    """

    def __init__(self, d_model, n_heads, sparse=False, factor=5.0, sample_factor=5.0,
                 key_stride=1, sample_seed=0):
        super().__init__()
        if d_model % n_heads:
            raise InvalidConfig(f"d_model={d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.sparse = sparse
        self.factor = factor
        self.sample_factor = sample_factor
        self.key_stride = key_stride
        self.sample_seed = sample_seed
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, x_q, x_kv=None, mask=None):
        x_kv = x_q if x_kv is None else x_kv
        q = _split_heads(self.q_proj(x_q), self.n_heads)
        k = _split_heads(self.k_proj(x_kv), self.n_heads)
        v = _split_heads(self.v_proj(x_kv), self.n_heads)
        if self.sparse:
            seed = None if self.training else self.sample_seed
            out = probsparse_attention(q, k, v, self.factor, seed, mask, self.sample_factor,
                                       self.key_stride)
        else:
            out = full_attention(q, k, v, mask)
        return self.out_proj(_merge_heads(out))


class HiLoAttention(nn.Module):
    """Split-head ProbSparse self-attention over a spectrogram token grid.

    Hi heads attend at full resolution. Lo heads attend on an average-pooled
    grid whose outputs are nearest-neighbour upsampled back to every token.
    Head outputs are concatenated (Hi first) and projected to ``d_model``.
    """

    def __init__(self, cfg: AttentionConfig, sample_seed=0):
        super().__init__()
        self.cfg = cfg
        self.sample_seed = sample_seed
        dh = cfg.d_head
        self.hi_qkv = nn.Linear(cfg.d_model, 3 * cfg.n_heads_hi * dh) if cfg.n_heads_hi else None
        self.lo_qkv = nn.Linear(cfg.d_model, 3 * cfg.n_heads_lo * dh) if cfg.n_heads_lo else None
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)

    def pooled_shape(self, grid_shape):
        k, s = self.cfg.lo_pool_kernel, self.cfg.lo_pool_stride
        Fp = (grid_shape[0] - k) // s + 1 if grid_shape[0] >= k else 0
        Tp = (grid_shape[1] - k) // s + 1 if grid_shape[1] >= k else 0
        return Fp, Tp

    def _attend(self, x, qkv, n_heads, dilation):
        q, k, v = (_split_heads(t, n_heads) for t in qkv(x).chunk(3, dim=-1))
        seed = None if self.training else self.sample_seed
        out = probsparse_attention(q, k, v, self.cfg.probsparse_factor, seed,
                                   sample_factor=self.cfg.sample_factor, key_stride=max(1, dilation))
        return _merge_heads(out)

    def hi_path(self, x, grid_shape):
        return self._attend(x, self.hi_qkv, self.cfg.n_heads_hi, self.cfg.hi_dilation)

    def lo_path(self, x, grid_shape):
        B, L, D = x.shape
        Fg, Tg = grid_shape
        Fp, Tp = self.pooled_shape(grid_shape)
        if Fp < 1 or Tp < 1:
            raise InvalidConfig(
                f"pooling kernel {self.cfg.lo_pool_kernel} leaves an empty grid for shape {grid_shape}"
            )
        k, s = self.cfg.lo_pool_kernel, self.cfg.lo_pool_stride
        img = x.view(B, Fg, Tg, D).permute(0, 3, 1, 2)
        pooled = F.avg_pool2d(img, k, s).flatten(2).transpose(1, 2)
        out = self._attend(pooled, self.lo_qkv, self.cfg.n_heads_lo, self.cfg.lo_dilation)
        C = out.shape[-1]
        out = out.transpose(1, 2).reshape(B, C, Fp, Tp)
        if (Fp, Tp) != (Fg, Tg):
            out = F.interpolate(out, size=(Fg, Tg), mode="nearest")
        return out.flatten(2).transpose(1, 2)

    def forward(self, x, grid_shape):
        if x.shape[1] != grid_shape[0] * grid_shape[1]:
            raise ShapeMismatch(f"grid {grid_shape} does not tile {x.shape[1]} tokens")
        parts = []
        if self.hi_qkv is not None:
            parts.append(self.hi_path(x, grid_shape))
        if self.lo_qkv is not None:
            parts.append(self.lo_path(x, grid_shape))
        return self.proj(torch.cat(parts, dim=-1))


def hilo_attention(grid: TokenGrid, cfg: AttentionConfig, weights: HiLoAttention) -> TokenGrid:
    if grid.grid_shape is None:
        raise InvalidArgument("HiLo attention needs a grid shape")
    if weights.cfg != cfg:
        raise InvalidConfig("weights were built for a different attention config")
    return TokenGrid(weights(grid.tokens, grid.grid_shape), grid.grid_shape)
