import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from shaftformer.dataset import DatasetSplit, FlawLevel, TestCondition, split_dataset, synth_dataset, synth_record, zscore
from shaftformer.errors import DivergenceDetected, InvalidConfig, ShapeMismatch
from shaftformer.model import ModelConfig, build_model
from shaftformer.spectral import stft
from shaftformer.training import (
    GRADIENT_BLOCKS,
    SearchSpace,
    TrainConfig,
    apply_trial,
    freq_mse_loss,
    gradient_check,
    history_csv,
    hyperparameter_search,
    sweep_csv,
    train,
    window_mse,
)
from shaftformer.windows import make_windows

TINY_SF = ModelConfig(variant="SF", d_model=8, d_ff=16, src_len=32, tgt_len=8, n_encoder_layers=1)
TINY_SSF = ModelConfig(variant="SSF", d_model=8, d_ff=16, time_resolution=8, src_frames=4, tgt_frames=2,
                       mean_kernel=3, variance_kernel=3, elt_kernel=3)


@pytest.fixture(scope="module")
def small_split():
    return split_dataset(synth_dataset(12, duration_s=6.0), seed=0)


class TestFreqMse:
    def test_equal_inputs(self):
        s = stft(np.random.default_rng(0).standard_normal(64), 16)
        assert freq_mse_loss(s, s).item() == 0.0

    def test_constant_offset(self):
        a = torch.randn(2, 5, 7)
        assert freq_mse_loss(a + 1, a).item() == pytest.approx(1.0, abs=1e-14)

    def test_brute_force_sum(self, rng):
        a, b = rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))
        total = 0.0
        for c in range(2):
            for i in range(4):
                for j in range(4):
                    total += (a[c, i, j] - b[c, i, j]) ** 2
        assert freq_mse_loss(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(total / 32, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            freq_mse_loss(torch.zeros(2, 3, 4), torch.zeros(2, 3, 5))

    # squared differences below ~1e-160 underflow to zero, so keep magnitudes above that
    _entries = st.lists(st.floats(-1e3, 1e3).filter(lambda v: v == 0 or abs(v) > 1e-100), min_size=8, max_size=8)

    @settings(max_examples=50, deadline=None)
    @given(_entries, _entries)
    def test_nonnegative_and_zero_iff_equal(self, a, b):
        ta, tb = torch.tensor(a).view(2, 2, 2), torch.tensor(b).view(2, 2, 2)
        loss = freq_mse_loss(ta, tb).item()
        assert loss >= 0
        assert (loss == 0) == torch.equal(ta, tb)


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [{"learning_rate": -1.0}, {"learning_rate": math.nan}, {"max_epochs": 0},
                                    {"batch_size": 0}, {"early_stop_patience": 0}, {"window_stride": 0},
                                    {"loss_domain": "wavelet"}])
    def test_rejects(self, kw):
        with pytest.raises(InvalidConfig):
            TrainConfig(**kw)

    def test_domain_must_match_variant(self):
        assert TrainConfig().domain_for(TINY_SSF) == "frequency"
        assert TrainConfig(loss_domain="time").domain_for(TINY_SF) == "time"
        with pytest.raises(InvalidConfig):
            TrainConfig(loss_domain="time").domain_for(TINY_SSF)

    def test_round_trip(self):
        cfg = TrainConfig(seed=4, batch_size=7)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTrain:
    def test_zero_learning_rate_leaves_weights(self, small_split):
        result = train(TINY_SF, TrainConfig(learning_rate=0.0, max_epochs=3, seed=2, window_stride=16), small_split,
                       calibrate=False)
        torch.manual_seed(2)
        fresh = build_model(TINY_SF).double().state_dict()
        for name, value in fresh.items():
            assert torch.equal(result.checkpoint.state[name], value), name

    @pytest.mark.parametrize("cfg", [TINY_SF, TINY_SSF])
    def test_same_seed_same_history(self, small_split, cfg):
        tcfg = TrainConfig(max_epochs=3, seed=5, window_stride=8)
        a = train(cfg, tcfg, small_split, calibrate=False)
        b = train(cfg, tcfg, small_split, calibrate=False)
        assert history_csv(a.history) == history_csv(b.history)
        assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()

    def test_checkpoint_holds_best_validation_weights(self, small_split):
        result = train(TINY_SSF, TrainConfig(max_epochs=8, seed=1, window_stride=4), small_split)
        model = result.checkpoint.build()
        val = make_windows(small_split.validation, TINY_SSF, TINY_SSF.tgt_frames)
        assert float(window_mse(model, val).mean()) == pytest.approx(result.best_val_loss, rel=1e-12)
        assert result.checkpoint.calibration["val_mse"] == result.best_val_loss

    def test_early_stopping_halts(self, small_split):
        result = train(TINY_SF, TrainConfig(learning_rate=0.0, max_epochs=50, early_stop_patience=2,
                                            window_stride=32), small_split, calibrate=False)
        assert len(result.history) == 3

    def test_history_csv_header(self, small_split):
        result = train(TINY_SF, TrainConfig(max_epochs=2, window_stride=32), small_split, calibrate=False)
        lines = history_csv(result.history).splitlines()
        assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 3

    def test_divergence_reports_epoch(self, small_split):
        with pytest.raises(DivergenceDetected) as info:
            train(TINY_SF, TrainConfig(learning_rate=1e300, max_epochs=5, window_stride=16, grad_clip=None),
                  small_split, calibrate=False)
        assert info.value.epoch >= 1
        assert info.value.exit_code == 3

    def test_empty_validation(self, small_split):
        split = DatasetSplit(small_split.train, [], small_split.test, 0)
        with pytest.raises(InvalidConfig):
            train(TINY_SF, TrainConfig(max_epochs=1), split)

    @pytest.mark.slow
    def test_tiny_overfit(self):
        conds = [TestCondition(FlawLevel.D0), TestCondition(FlawLevel.D2, speed_kmh=50.0)]
        records = [synth_record(c, 4.0, 64.0, 0.1, 40 + i) for i, c in enumerate(conds)]
        records = [zscore(r) for r in records]
        split = DatasetSplit(records, records, [], 0)
        cfg = ModelConfig(variant="SF", d_model=16, d_ff=32, src_len=32, tgt_len=8, n_encoder_layers=1)
        result = train(cfg, TrainConfig(max_epochs=300, early_stop_patience=300, seed=0), split, calibrate=False)
        assert len(result.history) == 300
        assert result.history[-1].train_loss < 0.05


class TestGradientCheck:
    def test_linear_block(self):
        assert gradient_check("linear", trials=3) < 1e-9

    def test_sample_head_block(self):
        assert gradient_check("sample_head", trials=3) < 1e-6

    @pytest.mark.parametrize("block", sorted(GRADIENT_BLOCKS))
    def test_every_block(self, block):
        assert gradient_check(block, trials=3, seed=0) < 1e-3

    def test_max_pool_tie_is_a_kink_not_a_bug(self):
        # Seed 1 draws a distilling instance with two pooled values within 1e-5 of
        # each other, so the 1e-5 central difference straddles the kink.
        assert gradient_check("distilling", trials=2, seed=1) > 1e-3
        assert gradient_check("distilling", trials=2, seed=1, step=1e-7) < 1e-6

    def test_corrupted_gradient_detected(self, corrupted_block):
        assert gradient_check(corrupted_block, trials=2) > 1e-2

    def test_unknown_block(self):
        with pytest.raises(InvalidConfig):
            gradient_check("nonexistent")


class TestSearch:
    FAST = TrainConfig(max_epochs=1, early_stop_patience=1, window_stride=16)

    def test_bounds_validated(self):
        with pytest.raises(InvalidConfig):
            SearchSpace({"mean_kernel": (7, 3)})
        with pytest.raises(InvalidConfig):
            SearchSpace({"n_encoder_layers": (1.5, 3)})
        with pytest.raises(InvalidConfig):
            SearchSpace({"learning_rate": (0.0, 1e-2)})

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_samples_stay_in_bounds(self, seed):
        space = SearchSpace.table4()
        params = space.sample(np.random.default_rng(seed))
        for name, (lo, hi) in space.bounds.items():
            assert lo <= params[name] <= hi
        for name in ("elt_kernel", "mean_kernel", "variance_kernel"):
            assert params[name] % 2 == 1

    def test_learning_rate_is_log_uniform(self):
        space = SearchSpace({"learning_rate": (1e-4, 1e-2)})
        rng = np.random.default_rng(0)
        logs = np.log10([space.sample(rng)["learning_rate"] for _ in range(4000)])
        # log10 of a log-uniform draw is uniform on [-4, -2]: mean -3, half the mass below it
        assert abs(logs.mean() + 3) < 0.03
        assert abs(np.mean(logs < -3) - 0.5) < 0.03

    def test_apply_trial_rounds_width(self):
        mcfg, tcfg = apply_trial(ModelConfig(d_model=32), TrainConfig(),
                                 {"n_heads_hi": 3, "n_heads_lo": 2, "learning_rate": 1e-3})
        assert mcfg.d_model == 40 and mcfg.attention.d_model == 40
        assert tcfg.learning_rate == 1e-3

    def test_budget_one(self, small_split):
        trials = hyperparameter_search(SearchSpace.desk(), 1, small_split, train_cfg=self.FAST,
                                       model_cfg=TINY_SSF)
        assert len(trials) == 1 and trials[0].index == 0

    def test_collapsed_bounds_give_identical_trials(self, small_split):
        space = SearchSpace({"mean_kernel": (5, 5), "learning_rate": (2e-3, 2e-3), "dropout": (0.0, 0.0)})
        trials = hyperparameter_search(space, 3, small_split, train_cfg=self.FAST, model_cfg=TINY_SSF)
        assert len({repr(t.params) for t in trials}) == 1
        assert len({t.val_loss for t in trials}) == 1

    def test_budget_zero(self, small_split):
        with pytest.raises(InvalidConfig):
            hyperparameter_search(SearchSpace.desk(), 0, small_split)

    def test_desk_sweep_best_beats_median(self, small_split):
        trials = hyperparameter_search(SearchSpace.desk(), 20, small_split, model_cfg=TINY_SSF, train_cfg=self.FAST)
        losses = [t.val_loss for t in trials]
        assert all(math.isfinite(v) for v in losses)
        assert losses == sorted(losses)
        assert losses[0] <= np.median(losses)
        assert len({repr(t.params) for t in trials}) == 20

    def test_table4_sweep_ranked(self, small_split):
        # most wide-range draws do not fit 6 s records (pooling kernels wider than the
        # grid, frames longer than the record); those trials are recorded, not fatal
        base = ModelConfig(variant="SSF", d_model=8, d_ff=16, src_frames=4, tgt_frames=2)
        trials = hyperparameter_search(SearchSpace.table4(), 20, small_split, model_cfg=base, train_cfg=self.FAST)
        losses = [t.val_loss for t in trials]
        assert len(trials) == 20
        assert losses == sorted(losses)
        assert losses[0] <= np.median(losses)
        assert all(t.error for t in trials if math.isinf(t.val_loss))
        csv_lines = sweep_csv(trials).splitlines()
        assert csv_lines[0].startswith("trial,") and csv_lines[0].endswith(",val_loss")
        assert len(csv_lines) == 21
