import time

import numpy as np
import pytest
import torch

torch.set_default_dtype(torch.float64)


def dense_dft(x, freqs_hz, sample_rate_hz):
    """Direct DTFT evaluation, independent of numpy.fft."""
    n = np.arange(len(x))
    basis = np.exp(-2j * np.pi * np.outer(freqs_hz, n) / sample_rate_hz)
    return basis @ np.asarray(x)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Shared desk-scale trainings. Several test modules need trained models and
# each training costs about a minute, so results are memoized per session.

from shaftformer.dataset import split_dataset, synth_dataset  # noqa: E402
from shaftformer.model import ModelConfig  # noqa: E402
from shaftformer.training import TrainConfig, train  # noqa: E402

DESK_SEEDS = (0, 1, 2, 3, 4)
DESK_EPOCHS = 40
# Strides give both variants the same number of training windows per epoch:
# 4 SSF frames cover the 64 samples between SF windows.
DESK_STRIDE = {"SSF": 4, "SF": 64}


def desk_model_config(variant, **kw):
    return ModelConfig(variant=variant, **kw)


def desk_train_config(variant, seed):
    return TrainConfig(max_epochs=DESK_EPOCHS, early_stop_patience=10, seed=seed,
                       window_stride=DESK_STRIDE[variant])


@pytest.fixture(scope="session")
def desk_split():
    return split_dataset(synth_dataset(48), seed=0)


@pytest.fixture(scope="session")
def desk_training(desk_split):
    cache = {}

    def get(variant, seed=0, use_positional_encoding=True):
        key = (variant, seed, use_positional_encoding)
        if key not in cache:
            cfg = desk_model_config(variant, use_positional_encoding=use_positional_encoding)
            t0 = time.perf_counter()
            cache[key] = train(cfg, desk_train_config(variant, seed), desk_split)
            get.seconds[key] = time.perf_counter() - t0
        return cache[key]

    get.seconds = {}
    return get


@pytest.fixture(scope="session")
def ssf_checkpoint(desk_training):
    return desk_training("SSF", 0).checkpoint


class _WrongSquare(torch.autograd.Function):
    """x**2 whose backward reports 3x instead of 2x."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return 3 * x * grad


@pytest.fixture
def corrupted_block():
    from shaftformer.training import GRADIENT_BLOCKS, register_block

    name = "corrupted_square"

    @register_block(name)
    def _build(gen):
        w = torch.randn(6, generator=gen).requires_grad_(True)
        return (lambda: _WrongSquare.apply(w).sum()), [w]

    yield name
    GRADIENT_BLOCKS.pop(name, None)


# One summary line per acceptance criterion, shown after the test run.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
