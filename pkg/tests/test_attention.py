import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from shaftformer.attention import (
    AttentionConfig,
    HiLoAttention,
    MultiHeadAttention,
    TokenGrid,
    frame_causal_mask,
    full_attention,
    hilo_attention,
    n_sampled_keys,
    n_top_queries,
    positional_encoding,
    probsparse_attention,
    sample_key_indices,
)
from shaftformer.errors import InvalidArgument, InvalidConfig, ShapeMismatch


def loop_attention(q, k, v):
    """Row-by-row softmax attention with python scalars."""
    q, k, v = (np.asarray(t.detach()) for t in (q, k, v))
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        s = [sum(q[i, a] * k[j, a] for a in range(q.shape[1])) / math.sqrt(q.shape[1])
             for j in range(k.shape[0])]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        z = sum(e)
        for j in range(k.shape[0]):
            out[i] += e[j] / z * v[j]
    return out


def loop_measure(q, k, key_index):
    q, k = np.asarray(q), np.asarray(k)
    d = q.shape[1]
    res = []
    for i in range(q.shape[0]):
        s = [float(q[i] @ k[j]) / math.sqrt(d) for j in key_index]
        res.append(max(s) - sum(s) / len(s))
    return np.array(res)


def _qkv(gen, L_Q, L_K, d, dv=None):
    dv = dv or d
    return (torch.randn(L_Q, d, generator=gen), torch.randn(L_K, d, generator=gen),
            torch.randn(L_K, dv, generator=gen))


class TestFullAttention:
    def test_single_key(self):
        g = torch.Generator().manual_seed(0)
        q, k, v = _qkv(g, 5, 1, 4, 3)
        out = full_attention(q, k, v)
        assert torch.equal(out, v.expand(5, 3))

    def test_identical_keys_average_values(self):
        g = torch.Generator().manual_seed(1)
        q, _, v = _qkv(g, 6, 4, 8)
        k = torch.randn(1, 8, generator=g).expand(4, 8)
        torch.testing.assert_close(full_attention(q, k, v), v.mean(0).expand(6, 8), atol=1e-14, rtol=0)

    def test_matches_loop_oracle(self):
        g = torch.Generator().manual_seed(2)
        q, k, v = _qkv(g, 4, 4, 8)
        np.testing.assert_allclose(full_attention(q, k, v).numpy(), loop_attention(q, k, v), atol=1e-12)

    def test_weights_are_stochastic(self):
        g = torch.Generator().manual_seed(3)
        for _ in range(20):
            q, k, v = _qkv(g, 7, 9, 5)
            _, w = full_attention(q, k, v, return_weights=True)
            assert (w >= 0).all()
            torch.testing.assert_close(w.sum(-1), torch.ones(7), atol=1e-12, rtol=0)

    def test_value_column_equivariance(self):
        g = torch.Generator().manual_seed(4)
        q, k, v = _qkv(g, 5, 6, 4, 7)
        perm = torch.randperm(7, generator=g)
        torch.testing.assert_close(full_attention(q, k, v[:, perm]), full_attention(q, k, v)[:, perm],
                                   atol=0, rtol=0)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeMismatch):
            full_attention(torch.ones(3, 4), torch.ones(5, 3), torch.ones(5, 2))
        with pytest.raises(ShapeMismatch):
            full_attention(torch.ones(3, 4), torch.ones(5, 4), torch.ones(4, 2))
        with pytest.raises(ShapeMismatch):
            full_attention(torch.ones(3, 4), torch.ones(5, 4), torch.ones(5, 2),
                           mask=torch.ones(5, 3, dtype=torch.bool))

    def test_mask(self):
        g = torch.Generator().manual_seed(5)
        q, k, v = _qkv(g, 4, 4, 3)
        out = full_attention(q, k, v, mask=torch.ones(4, 4, dtype=torch.bool).tril())
        torch.testing.assert_close(out[0], v[0])
        np.testing.assert_allclose(out[2].numpy(), loop_attention(q[2:3], k[:3], v[:3])[0], atol=1e-12)


class TestProbSparse:
    def test_full_selection_equals_full_attention(self):
        g = torch.Generator().manual_seed(10)
        for trial in range(200):
            L_Q, L_K = (int(x) for x in torch.randint(1, 65, (2,), generator=g))
            d = int(torch.randint(1, 33, (1,), generator=g))
            q, k, v = _qkv(g, L_Q, L_K, d)
            out = probsparse_attention(q, k, v, c=1e6, seed=trial)
            assert (out - full_attention(q, k, v)).abs().max() <= 1e-10

    def test_single_query(self):
        g = torch.Generator().manual_seed(11)
        q, k, v = _qkv(g, 1, 9, 4)
        torch.testing.assert_close(probsparse_attention(q, k, v, c=0.1, seed=0), full_attention(q, k, v))

    def test_sparse_case_against_brute_force(self):
        g = torch.Generator().manual_seed(12)
        q, k, v = _qkv(g, 32, 24, 16)
        seed = 99
        assert n_top_queries(32, 1.0) == 4
        out, top = probsparse_attention(q, k, v, c=1.0, seed=seed, return_index=True)
        key_index = sample_key_indices(24, n_sampled_keys(24), seed).tolist()
        measure = loop_measure(q.numpy(), k.numpy(), key_index)
        expected = sorted(np.argsort(-measure)[:4].tolist())
        assert top.tolist() == expected
        dense = loop_attention(q, k, v)
        for i in range(32):
            if i in expected:
                np.testing.assert_allclose(out[i].numpy(), dense[i], atol=1e-12)
            else:
                assert torch.equal(out[i], v.mean(0))

    def test_batched_heads_select_independently(self):
        g = torch.Generator().manual_seed(13)
        q = torch.randn(2, 3, 20, 8, generator=g)
        k = torch.randn(2, 3, 20, 8, generator=g)
        v = torch.randn(2, 3, 20, 8, generator=g)
        out = probsparse_attention(q, k, v, c=1.0, seed=4)
        for b in range(2):
            for h in range(3):
                torch.testing.assert_close(out[b, h], probsparse_attention(q[b, h], k[b, h], v[b, h], c=1.0, seed=4))

    def test_seed_determinism(self):
        g = torch.Generator().manual_seed(14)
        q, k, v = _qkv(g, 50, 50, 8)
        a = probsparse_attention(q, k, v, c=1.0, seed=3)
        b = probsparse_attention(q, k, v, c=1.0, seed=3)
        assert torch.equal(a, b)

    def test_masked_rows_use_allowed_mean(self):
        g = torch.Generator().manual_seed(15)
        q, k, v = _qkv(g, 16, 16, 4)
        mask = torch.ones(16, 16, dtype=torch.bool).tril()
        out, top = probsparse_attention(q, k, v, c=0.5, seed=0, mask=mask, return_index=True)
        for i in range(16):
            if i in top.tolist():
                torch.testing.assert_close(out[i], full_attention(q[i:i + 1], k[: i + 1], v[: i + 1])[0])
            else:
                torch.testing.assert_close(out[i], v[: i + 1].mean(0))

    def test_key_stride(self):
        g = torch.Generator().manual_seed(16)
        q, k, v = _qkv(g, 6, 12, 4)
        out = probsparse_attention(q, k, v, c=1e6, seed=0, key_stride=3)
        torch.testing.assert_close(out, full_attention(q, k[::3], v[::3]))

    def test_gradients_flow_to_selected_rows(self):
        g = torch.Generator().manual_seed(17)
        q, k, v = (t.requires_grad_() for t in _qkv(g, 20, 20, 4))
        out, top = probsparse_attention(q, k, v, c=1.0, seed=0, return_index=True)
        out.sum().backward()
        nonzero = set(torch.nonzero(q.grad.abs().sum(-1)).flatten().tolist())
        assert nonzero <= set(top.tolist())
        assert v.grad.abs().sum() > 0


def _grid(B, Fg, Tg, d, seed=0):
    return torch.randn(B, Fg * Tg, d, generator=torch.Generator().manual_seed(seed))


class TestHiLo:
    def test_no_lo_heads_is_hi_multihead(self):
        cfg = AttentionConfig(d_model=16, n_heads_hi=2, n_heads_lo=0, probsparse_factor=2.0)
        torch.manual_seed(0)
        hilo = HiLoAttention(cfg).eval()
        mha = MultiHeadAttention(16, 2, sparse=True, factor=2.0).eval()
        wq, wk, wv = hilo.hi_qkv.weight.chunk(3, 0)
        bq, bk, bv = hilo.hi_qkv.bias.chunk(3, 0)
        with torch.no_grad():
            for lin, w, b in ((mha.q_proj, wq, bq), (mha.k_proj, wk, bk), (mha.v_proj, wv, bv)):
                lin.weight.copy_(w)
                lin.bias.copy_(b)
            mha.out_proj.load_state_dict(hilo.proj.state_dict())
        x = _grid(2, 5, 6, 16)
        torch.testing.assert_close(hilo(x, (5, 6)), mha(x), atol=1e-12, rtol=0)

    def test_identity_pooling_lo_equals_hi(self):
        cfg = AttentionConfig(d_model=16, n_heads_hi=2, n_heads_lo=2, lo_pool_kernel=1, lo_pool_stride=1)
        hilo = HiLoAttention(cfg).eval()
        with torch.no_grad():
            hilo.lo_qkv.load_state_dict(hilo.hi_qkv.state_dict())
        x = _grid(3, 4, 7, 16, seed=1)
        torch.testing.assert_close(hilo.lo_path(x, (4, 7)), hilo.hi_path(x, (4, 7)), atol=0, rtol=0)

    def test_constant_tokens_give_constant_output(self):
        cfg = AttentionConfig(d_model=12, n_heads_hi=1, n_heads_lo=2, lo_pool_kernel=2, lo_pool_stride=2)
        hilo = HiLoAttention(cfg).eval()
        token = torch.randn(12)
        x = token.expand(1, 30, 12).clone()
        out = hilo(x, (5, 6))
        torch.testing.assert_close(out, out[:, :1].expand_as(out), atol=1e-12, rtol=0)
        # analytic propagation: every head returns its value projection of the token
        v = torch.cat([hilo.hi_qkv(token).chunk(3)[2], hilo.lo_qkv(token).chunk(3)[2]])
        torch.testing.assert_close(out[0, 0], hilo.proj(v), atol=1e-12, rtol=0)

    @settings(max_examples=25, deadline=None)
    @given(hi=st.integers(0, 3), lo=st.integers(0, 3), Fg=st.integers(2, 9), Tg=st.integers(2, 9),
           k=st.integers(1, 2), s=st.integers(1, 3), dil=st.integers(0, 3))
    def test_shape_preserved(self, hi, lo, Fg, Tg, k, s, dil):
        if hi + lo == 0:
            return
        cfg = AttentionConfig(d_model=4 * (hi + lo), n_heads_hi=hi, n_heads_lo=lo, lo_pool_kernel=k,
                              lo_pool_stride=s, hi_dilation=dil, lo_dilation=dil)
        grid = TokenGrid(_grid(2, Fg, Tg, cfg.d_model), (Fg, Tg))
        out = hilo_attention(grid, cfg, HiLoAttention(cfg))
        assert out.tokens.shape == grid.tokens.shape and out.grid_shape == (Fg, Tg)

    def test_empty_pooled_grid(self):
        cfg = AttentionConfig(d_model=8, lo_pool_kernel=5)
        with pytest.raises(InvalidConfig):
            HiLoAttention(cfg)(_grid(1, 3, 8, 8), (3, 8))

    def test_bad_head_split(self):
        with pytest.raises(InvalidConfig):
            AttentionConfig(d_model=10, n_heads_hi=2, n_heads_lo=1)
        with pytest.raises(InvalidConfig):
            AttentionConfig(n_heads_hi=0, n_heads_lo=0)

    def test_grid_must_tile(self):
        with pytest.raises(ShapeMismatch):
            TokenGrid(torch.zeros(1, 10, 4), (3, 3))


class TestPositionalEncoding:
    def test_origin(self):
        pe = positional_encoding(5, 8)
        assert torch.equal(pe[0, 0::2], torch.zeros(4))
        assert torch.equal(pe[0, 1::2], torch.ones(4))

    def test_direct_value(self):
        assert positional_encoding(3, 4)[1, 0].item() == pytest.approx(0.841471, abs=1e-6)
        assert positional_encoding(3, 4)[2, 3].item() == pytest.approx(math.cos(2 / 10000 ** (2 / 4)))

    def test_range(self):
        pe = positional_encoding(500, 64)
        assert pe.abs().max() <= 1.0

    def test_odd_dimension(self):
        with pytest.raises(InvalidArgument):
            positional_encoding(4, 5)


def test_frame_causal_mask():
    m = frame_causal_mask(2, 3)
    # token index = row * 3 + frame
    assert m[0].tolist() == [True, False, False, True, False, False]
    assert m[5].tolist() == [True] * 6
