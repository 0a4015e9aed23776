"""Teacher-forced training, gradient verification and random hyperparameter search."""

from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch

from shaftformer.checkpoint import ModelCheckpoint, from_model
from shaftformer.dataset import DatasetSplit
from shaftformer.errors import DivergenceDetected, InvalidConfig, ShapeMismatch
from shaftformer.model import ModelConfig, build_model, sample_head
from shaftformer.spectral import Spectrogram
from shaftformer.windows import WindowBatch, make_windows

LOSS_DOMAINS = ("time", "frequency")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.97881e-3
    max_epochs: int = 1000
    batch_size: int = 32
    early_stop_patience: int = 50
    seed: int = 0
    loss_domain: str | None = None  # None picks the variant's native domain
    window_stride: int = 1
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise InvalidConfig(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise InvalidConfig("max_epochs must be >= 1")
        if self.batch_size < 1 or self.early_stop_patience < 1 or self.window_stride < 1:
            raise InvalidConfig("batch_size, early_stop_patience and window_stride must be positive")
        if self.loss_domain is not None and self.loss_domain not in LOSS_DOMAINS:
            raise InvalidConfig(f"loss_domain must be one of {LOSS_DOMAINS}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise InvalidConfig("grad_clip must be positive or None")

    def domain_for(self, model_cfg: ModelConfig) -> str:
        native = "time" if model_cfg.variant == "SF" else "frequency"
        if self.loss_domain not in (None, native):
            raise InvalidConfig(f"{model_cfg.variant} trains in the {native} domain only")
        return native

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def _channels(x):
    if isinstance(x, Spectrogram):
        return torch.as_tensor(x.stacked())
    return torch.as_tensor(x)


def freq_mse_loss(pred, truth):
    """Mean squared error over both spectrogram channels jointly.

    Accepts :class:`Spectrogram` objects or ``[..., 2, F, T]`` tensors.
    """
    p, t = _channels(pred), _channels(truth)
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred {tuple(p.shape)} vs truth {tuple(t.shape)}")
    return torch.mean((p - t) ** 2)


def _forward(model, batch: WindowBatch):
    return model(batch.src, batch.dec_in, batch.features, batch.reference)


@torch.no_grad()
def window_mse(model, windows: WindowBatch, batch_size: int = 256) -> np.ndarray:
    """Teacher-forced MSE of the predictive mean, one value per window."""
    was_training = model.training
    model.eval()
    out = []
    for lo in range(0, len(windows), batch_size):
        b = windows.subset(np.arange(lo, min(lo + batch_size, len(windows))))
        err = (_forward(model, b).mu - b.target) ** 2
        out.append(err.flatten(1).mean(1).numpy())
    model.train(was_training)
    return np.concatenate(out)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for h in history:
        w.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss)])
    return buf.getvalue()


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    history: list

    @property
    def best_val_loss(self) -> float:
        return min(h.val_loss for h in self.history)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, split: DatasetSplit, calibrate: bool = True,
          log=None) -> TrainResult:
    """Fit a model with teacher forcing and early stopping on validation MSE.

    The training loss is the MSE of a reparameterized sample, so both the
    mean and the variance heads receive gradients. Validation uses the
    predictive mean. The returned checkpoint holds the best-validation weights.
    """
    if not split.train or not split.validation:
        raise InvalidConfig("training needs non-empty train and validation sets")
    train_cfg.domain_for(model_cfg)
    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg).double()
    train_w = make_windows(split.train, model_cfg, train_cfg.window_stride)
    val_w = make_windows(split.validation, model_cfg, _eval_stride(model_cfg))
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate, betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(train_cfg.seed)

    best, best_state, stale, history = math.inf, None, 0, []
    for epoch in range(1, train_cfg.max_epochs + 1):
        model.train()
        order = torch.randperm(len(train_w), generator=gen).numpy()
        total = 0.0
        for lo in range(0, len(order), train_cfg.batch_size):
            b = train_w.subset(order[lo : lo + train_cfg.batch_size])
            params = _forward(model, b)
            u = torch.rand(params.mu.shape, generator=gen, dtype=params.mu.dtype)
            eps = torch.randn(params.mu.shape, generator=gen, dtype=params.mu.dtype)
            loss = torch.mean((sample_head(params, u, eps) - b.target) ** 2)
            if not torch.isfinite(loss):
                raise DivergenceDetected(f"training loss became {loss.item()}", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            if train_cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            opt.step()
            total += loss.item() * len(b)
        val = float(window_mse(model, val_w).mean())
        if not math.isfinite(val):
            raise DivergenceDetected(f"validation loss became {val}", epoch=epoch)
        history.append(EpochStats(epoch, total / len(train_w), val))
        if log is not None:
            log(history[-1])
        if val < best:
            best, best_state, stale = val, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
            if stale >= train_cfg.early_stop_patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    calibration = {}
    if calibrate:
        from shaftformer.inference import calibrate_thresholds

        calibration = calibrate_thresholds(model, split.validation)
    calibration["val_mse"] = best
    ckpt = from_model(model, split.seed, split.ratios, train_cfg.to_dict(), calibration)
    return TrainResult(ckpt, history)


def _eval_stride(cfg: ModelConfig) -> int:
    return cfg.tgt_len if cfg.variant == "SF" else cfg.tgt_frames


# ---------------------------------------------------------------------------
# gradient verification

GRADIENT_BLOCKS = {}


def register_block(name: str):
    """Decorator adding a builder to the gradient-check registry.

    A builder takes a ``torch.Generator`` and returns ``(loss_fn, params)``:
    a closure producing a scalar and the float64 leaf tensors it depends on.
    """

    def deco(builder):
        GRADIENT_BLOCKS[name] = builder
        return builder

    return deco


def _leaf(shape, gen, positive=False):
    t = torch.randn(shape, generator=gen, dtype=torch.float64)
    if positive:
        t = t.abs() + 0.5
    return t.requires_grad_(True)


def _module_block(module, inputs_fn, gen):
    module = module.double().eval()
    inputs = inputs_fn()
    with torch.no_grad():
        out = module(*inputs)
    weights = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    params = list(module.parameters()) + [t for t in inputs if isinstance(t, torch.Tensor) and t.requires_grad]

    def loss():
        return torch.sum(module(*inputs) * weights)

    return loss, params


def _seed_modules(gen):
    torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))


@register_block("linear")
def _linear_block(gen):
    _seed_modules(gen)
    return _module_block(torch.nn.Linear(5, 3), lambda: (_leaf((4, 5), gen),), gen)


@register_block("elt")
def _elt_block(gen):
    from shaftformer.model import ELTEmbedding

    _seed_modules(gen)
    mod = ELTEmbedding(2, 3, 8, kernel=3, n_layers=2, causal=True)
    return _module_block(mod, lambda: (_leaf((2, 2, 3, 7), gen), _leaf((2, 10), gen)), gen)


@register_block("probsparse_attention")
def _probsparse_block(gen):
    from shaftformer.attention import MultiHeadAttention

    _seed_modules(gen)
    mod = MultiHeadAttention(8, 2, sparse=True, factor=1.0)
    return _module_block(mod, lambda: (_leaf((2, 24, 8), gen),), gen)


@register_block("hilo_attention")
def _hilo_block(gen):
    from shaftformer.attention import AttentionConfig, HiLoAttention

    _seed_modules(gen)
    cfg = AttentionConfig(d_model=8, n_heads_hi=1, n_heads_lo=1, lo_pool_kernel=2, lo_pool_stride=2)
    mod = HiLoAttention(cfg)
    x = _leaf((2, 5 * 6, 8), gen)
    return _module_block(_GridWrap(mod, (5, 6)), lambda: (x,), gen)


class _GridWrap(torch.nn.Module):
    def __init__(self, inner, grid):
        super().__init__()
        self.inner, self.grid = inner, grid

    def forward(self, x):
        return self.inner(x, self.grid)


@register_block("distilling")
def _distilling_block(gen):
    from shaftformer.model import DistillingEncoderLayer

    _seed_modules(gen)
    cfg = ModelConfig(variant="SF", d_model=8, src_len=16)
    return _module_block(DistillingEncoderLayer(cfg), lambda: (_leaf((2, 16, 8), gen),), gen)


@register_block("frequency_filter")
def _filter_block(gen):
    from shaftformer.model import frequency_filter

    tokens, gains = _leaf((2, 4 * 3, 5), gen), _leaf((4,), gen)
    weights = torch.randn((2, 12, 5), generator=gen, dtype=torch.float64)
    return (lambda: torch.sum(frequency_filter(tokens, gains, (4, 3)) * weights)), [tokens, gains]


@register_block("sample_head")
def _sample_head_block(gen):
    from shaftformer.model import PredictiveParams

    mu, lam = _leaf((3, 4), gen), _leaf((3, 4), gen, positive=True)
    u = torch.rand((3, 4), generator=gen, dtype=torch.float64) * 0.9 + 0.05
    eps = torch.randn((3, 4), generator=gen, dtype=torch.float64)
    weights = torch.randn((3, 4), generator=gen, dtype=torch.float64)

    def loss():
        return torch.sum(sample_head(PredictiveParams(mu, lam), u, eps) * weights)

    return loss, [mu, lam]


def _tiny_model_cfg(variant):
    if variant == "SF":
        return ModelConfig(variant="SF", d_model=8, d_ff=16, src_len=16, tgt_len=4)
    return ModelConfig(variant="SSF", d_model=8, d_ff=16, freq_resolution=2, time_resolution=4,
                       src_frames=4, tgt_frames=2, mean_kernel=3, variance_kernel=3, elt_kernel=3)


def _model_block(variant, gen):
    _seed_modules(gen)
    cfg = _tiny_model_cfg(variant)
    model = build_model(cfg).double().eval()
    feats = torch.randn((2, 10), generator=gen, dtype=torch.float64)
    if variant == "SF":
        src, dec, ref = _leaf((2, 16), gen), _leaf((2, 4), gen), None
    else:
        shape = (2, 2, cfg.n_bins)
        src, dec, ref = _leaf(shape + (4,), gen), _leaf(shape + (2,), gen), _leaf(shape + (2,), gen)
    with torch.no_grad():
        p = model(src, dec, feats, ref)
    w_mu = torch.randn(p.mu.shape, generator=gen, dtype=torch.float64)
    w_lam = torch.randn(p.lam.shape, generator=gen, dtype=torch.float64)

    def loss():
        out = model(src, dec, feats, ref)
        return torch.sum(out.mu * w_mu) + torch.sum(out.lam * w_lam)

    return loss, list(model.parameters()) + [t for t in (src, dec, ref) if t is not None]


@register_block("sf_model")
def _sf_block(gen):
    return _model_block("SF", gen)


@register_block("ssf_model")
def _ssf_block(gen):
    return _model_block("SSF", gen)


def gradient_check(block: str, trials: int = 3, seed: int = 0, step: float = 1e-5,
                   n_coords: int = 24) -> float:
    """Worst norm-wise relative error between autograd and central differences.

    Each trial draws a fresh instance of ``block`` and compares gradients on a
    random subset of ``n_coords`` scalar parameters.
    """
    if block not in GRADIENT_BLOCKS:
        raise InvalidConfig(f"unknown block {block!r}; registered: {sorted(GRADIENT_BLOCKS)}")
    if trials < 1:
        raise InvalidConfig("trials must be positive")
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(trials):
        loss_fn, params = GRADIENT_BLOCKS[block](gen)
        for p in params:
            p.grad = None
        loss_fn().backward()
        coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
        pick = torch.randperm(len(coords), generator=gen)[:n_coords].tolist()
        analytic, numeric = [], []
        with torch.no_grad():
            for c in pick:
                i, j = coords[c]
                flat = params[i].view(-1)
                g = params[i].grad
                analytic.append(0.0 if g is None else g.view(-1)[j].item())
                orig = flat[j].item()
                flat[j] = orig + step
                up = loss_fn().item()
                flat[j] = orig - step
                down = loss_fn().item()
                flat[j] = orig
                numeric.append((up - down) / (2 * step))
        a, n = np.array(analytic), np.array(numeric)
        denom = max(np.linalg.norm(a), np.linalg.norm(n))
        if denom > 1e-12:
            worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst


# ---------------------------------------------------------------------------
# random hyperparameter search

_INT_PARAMS = {
    "lo_pool_kernel", "lo_pool_stride", "hi_dilation", "lo_dilation", "elt_kernel", "n_heads_hi",
    "n_heads_lo", "time_resolution", "mean_kernel", "n_encoder_layers", "freq_resolution",
    "time_compression", "variance_kernel",
}
_ODD_PARAMS = {"elt_kernel", "mean_kernel", "variance_kernel"}
_ATTENTION_PARAMS = {"lo_pool_kernel", "lo_pool_stride", "hi_dilation", "lo_dilation", "n_heads_hi", "n_heads_lo"}


@dataclass(frozen=True)
class SearchSpace:
    bounds: dict

    def __post_init__(self):
        for name, (lo, hi) in self.bounds.items():
            if lo > hi:
                raise InvalidConfig(f"{name}: min {lo} exceeds max {hi}")
            if name in _INT_PARAMS and (int(lo) != lo or int(hi) != hi):
                raise InvalidConfig(f"{name} needs integer bounds")
            if name == "learning_rate" and lo <= 0:
                raise InvalidConfig("learning_rate bounds must be positive")

    @classmethod
    def table4(cls) -> "SearchSpace":
        """Wide ranges sized for long, high-rate recordings."""
        return cls({
            "lo_pool_kernel": (3, 27), "lo_pool_stride": (1, 5), "hi_dilation": (0, 15),
            "lo_dilation": (15, 25), "dropout": (0.1, 0.6), "elt_kernel": (3, 27),
            "n_heads_hi": (1, 6), "n_heads_lo": (1, 6), "time_resolution": (8, 16),
            "learning_rate": (1e-4, 1e-2), "mean_kernel": (3, 27), "n_encoder_layers": (1, 4),
            "freq_resolution": (1, 30), "time_compression": (1, 5), "variance_kernel": (3, 27),
        })

    @classmethod
    def desk(cls) -> "SearchSpace":
        """Narrower ranges that fit the default synthetic records."""
        return cls({
            "lo_pool_kernel": (2, 4), "lo_pool_stride": (1, 3), "hi_dilation": (1, 2),
            "lo_dilation": (1, 2), "dropout": (0.0, 0.3), "elt_kernel": (3, 7),
            "n_heads_hi": (1, 2), "n_heads_lo": (1, 2), "learning_rate": (1e-4, 1e-2),
            "mean_kernel": (3, 7), "n_encoder_layers": (1, 3), "time_compression": (1, 3),
            "variance_kernel": (3, 7),
        })

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for name, (lo, hi) in sorted(self.bounds.items()):
            if name == "learning_rate":
                out[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            elif name in _ODD_PARAMS:
                odd = list(range(int(lo) | 1, int(hi) + 1, 2))
                out[name] = int(rng.choice(odd)) if odd else int(lo)
            elif name in _INT_PARAMS:
                out[name] = int(rng.integers(int(lo), int(hi) + 1))
            else:
                out[name] = float(rng.uniform(lo, hi))
        return out


def apply_trial(model_cfg: ModelConfig, train_cfg: TrainConfig, params: dict):
    """Configs for one trial; ``d_model`` is rounded up to fit the head count."""
    attn = {k: v for k, v in params.items() if k in _ATTENTION_PARAMS}
    model = {k: v for k, v in params.items() if k not in _ATTENTION_PARAMS and k != "learning_rate"}
    heads = attn.get("n_heads_hi", model_cfg.attention.n_heads_hi) + attn.get("n_heads_lo", model_cfg.attention.n_heads_lo)
    unit = heads * 2 // math.gcd(heads, 2)
    d_model = unit * math.ceil(model_cfg.d_model / unit)
    attention = replace(model_cfg.attention, d_model=d_model, **attn)
    mcfg = replace(model_cfg, d_model=d_model, attention=attention, **model)
    tcfg = replace(train_cfg, learning_rate=params.get("learning_rate", train_cfg.learning_rate))
    return mcfg, tcfg


@dataclass
class Trial:
    index: int
    params: dict
    val_loss: float
    error: str | None = None


def hyperparameter_search(space: SearchSpace, budget: int, split: DatasetSplit, seed: int = 0,
                          model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                          log=None) -> list:
    """Random search; returns trials sorted by ascending validation loss.

    Invalid or diverging configurations are kept with ``val_loss = inf`` and
    the error message.
    """
    if budget < 1:
        raise InvalidConfig("budget must be at least 1")
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig(max_epochs=5, early_stop_patience=5, window_stride=4)
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(budget):
        params = space.sample(rng)
        try:
            mcfg, tcfg = apply_trial(model_cfg, train_cfg, params)
            result = train(mcfg, replace(tcfg, seed=seed), split, calibrate=False)
            trials.append(Trial(i, params, result.best_val_loss))
        except (InvalidConfig, DivergenceDetected, ValueError) as exc:
            trials.append(Trial(i, params, math.inf, str(exc)))
        if log is not None:
            log(trials[-1])
    return sorted(trials, key=lambda t: (t.val_loss, t.index))


def sweep_csv(trials) -> str:
    names = sorted({k for t in trials for k in t.params})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial"] + names + ["val_loss"])
    for t in trials:
        w.writerow([t.index] + [t.params.get(k, "") for k in names] + [repr(t.val_loss)])
    return buf.getvalue()
