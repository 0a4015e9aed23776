"""Time-frequency transforms and decompositions on plain numpy arrays."""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from shaftformer.errors import InvalidArgument, ShapeMismatch

WINDOWS = ("hann", "hamming", "rectangular")


def get_window(name: str, frame_len: int) -> np.ndarray:
    """Analysis window of length ``frame_len``.

    ``hann`` is sampled at half-integer offsets, ``sin(pi * (n + 0.5) / N)**2``,
    so it has no zero taps: it still overlap-adds to 1 at ``hop = N / 2`` and
    every sample of a covered signal stays recoverable, including the first.
    """
    n = np.arange(frame_len)
    if name == "hann":
        return np.sin(np.pi * (n + 0.5) / frame_len) ** 2
    if name == "hamming":
        return 0.54 - 0.46 * np.cos(2 * np.pi * n / frame_len)
    if name == "rectangular":
        return np.ones(frame_len)
    raise InvalidArgument(f"unknown window {name!r}; expected one of {WINDOWS}")


def is_cola(window: str, frame_len: int, hop: int, rtol: float = 1e-10) -> bool:
    w = get_window(window, frame_len)
    if hop > frame_len:
        return False
    sums = np.array([w[r::hop].sum() for r in range(hop)])
    return bool(np.all(np.abs(sums - sums[0]) <= rtol * abs(sums[0])))


def spec_scale(frame_len: int, window: str = "hann") -> float:
    """Factor mapping raw STFT values of a unit-variance white signal to unit-variance channels."""
    w = get_window(window, frame_len)
    return float(np.sqrt(2.0 / np.sum(w**2)))


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """One-sided STFT with real and imaginary parts kept as separate channels.

    Both matrices are ``[F, T]``: rows are frequency bins, columns are frames.
    ``downsample`` records the cumulative (frequency, time) stride of any
    pooling applied after the transform.
    """

    real_part: np.ndarray
    imag_part: np.ndarray
    frame_len: int
    hop: int
    window: str = "hann"
    sample_rate_hz: float = 1.0
    downsample: tuple = (1, 1)

    def __post_init__(self):
        re = np.asarray(self.real_part, dtype=np.float64)
        im = np.asarray(self.imag_part, dtype=np.float64)
        if re.ndim != 2 or re.shape != im.shape:
            raise ShapeMismatch(f"channel shapes differ or are not 2-D: {re.shape} vs {im.shape}")
        if not (np.all(np.isfinite(re)) and np.all(np.isfinite(im))):
            raise InvalidArgument("spectrogram entries must be finite")
        if self.hop < 1 or self.hop > self.frame_len:
            raise InvalidArgument(f"need 1 <= hop <= frame_len, got hop={self.hop}")
        if self.window not in WINDOWS:
            raise InvalidArgument(f"unknown window {self.window!r}")
        object.__setattr__(self, "real_part", re)
        object.__setattr__(self, "imag_part", im)
        object.__setattr__(self, "downsample", tuple(int(d) for d in self.downsample))

    @property
    def shape(self):
        return self.real_part.shape

    @property
    def n_bins(self):
        return self.real_part.shape[0]

    @property
    def n_frames(self):
        return self.real_part.shape[1]

    @property
    def bin_hz(self) -> float:
        return self.sample_rate_hz / self.frame_len * self.downsample[0]

    def complex(self) -> np.ndarray:
        return self.real_part + 1j * self.imag_part

    def stacked(self) -> np.ndarray:
        """``[2, F, T]`` array (real, imag)."""
        return np.stack([self.real_part, self.imag_part])

    @classmethod
    def from_stacked(cls, arr, like: "Spectrogram") -> "Spectrogram":
        arr = np.asarray(arr)
        return replace(like, real_part=arr[0], imag_part=arr[1])

    def frames(self, start, stop) -> "Spectrogram":
        return replace(self, real_part=self.real_part[:, start:stop],
                       imag_part=self.imag_part[:, start:stop])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(
            f"# frame_len={self.frame_len};hop={self.hop};window={self.window};"
            f"sample_rate_hz={self.sample_rate_hz!r};downsample={self.downsample[0]}x{self.downsample[1]}\n"
        )
        hop_s = self.hop * self.downsample[1] / self.sample_rate_hz
        times = [repr(j * hop_s) for j in range(self.n_frames)]
        buf.write(",".join(["channel", "bin", "freq_hz"] + times) + "\n")
        for name, mat in (("real", self.real_part), ("imag", self.imag_part)):
            for f in range(self.n_bins):
                row = [name, str(f), repr(f * self.bin_hz)] + [repr(float(v)) for v in mat[f]]
                buf.write(",".join(row) + "\n")
        return buf.getvalue()


def stft(signal, frame_len: int, hop: int | None = None, window: str = "hann",
         sample_rate_hz: float = 1.0) -> Spectrogram:
    """Frames start at sample 0 with no padding: ``T = 1 + (len - frame_len) // hop``."""
    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    hop = frame_len // 2 if hop is None else int(hop)
    if frame_len < 1:
        raise InvalidArgument("frame_len must be positive")
    if hop < 1:
        raise InvalidArgument("hop must be at least 1")
    if hop > frame_len:
        raise InvalidArgument("hop larger than frame_len leaves gaps")
    if x.size < frame_len:
        raise InvalidArgument(f"signal of {x.size} samples is shorter than frame_len={frame_len}")
    w = get_window(window, frame_len)
    frames = sliding_window_view(x, frame_len)[::hop] * w
    spec = np.fft.rfft(frames, axis=1).T
    return Spectrogram(spec.real.copy(), spec.imag.copy(), frame_len, hop, window, sample_rate_hz)


def natural_length(n_frames: int, frame_len: int, hop: int) -> int:
    return (n_frames - 1) * hop + frame_len


def istft(spec: Spectrogram, out_len: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse (divides by the overlapped squared window)."""
    if spec.downsample != (1, 1):
        raise InvalidArgument("cannot invert a pooled spectrogram")
    if spec.n_bins != spec.frame_len // 2 + 1:
        raise ShapeMismatch(f"expected {spec.frame_len // 2 + 1} bins, got {spec.n_bins}")
    if not is_cola(spec.window, spec.frame_len, spec.hop):
        raise InvalidArgument(
            f"{spec.window} window with frame_len={spec.frame_len}, hop={spec.hop} is not COLA"
        )
    n = natural_length(spec.n_frames, spec.frame_len, spec.hop)
    out_len = n if out_len is None else int(out_len)
    if out_len < 0:
        raise InvalidArgument("out_len must be non-negative")
    w = get_window(spec.window, spec.frame_len)
    frames = np.fft.irfft(spec.complex().T, n=spec.frame_len, axis=1) * w
    acc = np.zeros(n)
    norm = np.zeros(n)
    w2 = w**2
    for j in range(spec.n_frames):
        s = j * spec.hop
        acc[s : s + spec.frame_len] += frames[j]
        norm[s : s + spec.frame_len] += w2
    x = np.divide(acc, norm, out=np.zeros(n), where=norm > 0)
    if out_len <= n:
        return x[:out_len]
    return np.concatenate([x, np.zeros(out_len - n)])


def frame_energies(spec: Spectrogram) -> np.ndarray:
    """Per-frame energy of the windowed frames computed from one-sided bins."""
    mag2 = spec.real_part**2 + spec.imag_part**2
    weights = np.full(spec.n_bins, 2.0)
    weights[0] = 1.0
    if spec.frame_len % 2 == 0:
        weights[-1] = 1.0
    return weights @ mag2 / spec.frame_len


def avg_pool2d(spec: Spectrogram, kernel=(1, 1), stride=(1, 1)) -> Spectrogram:
    kf, kt = (int(k) for k in kernel)
    sf, st = (int(s) for s in stride)
    if kf < 1 or kt < 1 or sf < 1 or st < 1:
        raise InvalidArgument("kernel and stride entries must be >= 1")
    F, T = spec.shape
    if kf > F or kt > T:
        raise InvalidArgument(f"kernel {(kf, kt)} exceeds spectrogram shape {(F, T)}")

    def pool(mat):
        return sliding_window_view(mat, (kf, kt))[::sf, ::st].mean(axis=(-2, -1))

    return replace(
        spec,
        real_part=pool(spec.real_part),
        imag_part=pool(spec.imag_part),
        downsample=(spec.downsample[0] * sf, spec.downsample[1] * st),
    )


@dataclass(frozen=True, eq=False)
class StlComponents:
    trend: np.ndarray
    seasonal: np.ndarray
    residual: np.ndarray
    period: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# period={self.period}\n")
        buf.write(",".join(["component"] + [str(i) for i in range(self.trend.size)]) + "\n")
        for name in ("trend", "seasonal", "residual"):
            buf.write(",".join([name] + [repr(float(v)) for v in getattr(self, name)]) + "\n")
        return buf.getvalue()


def stl_decompose(signal, period: int, loess_span: int = 7) -> StlComponents:
    """Seasonal-trend decomposition by LOESS with one robustness pass.

    The residual is whatever the trend and seasonal parts leave over, so the
    three components always add back to the input.
    """
    from statsmodels.tsa.seasonal import STL

    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    period = int(period)
    if period < 2:
        raise InvalidArgument("period must be at least 2")
    if x.size < 2 * period:
        raise InvalidArgument(f"signal of {x.size} samples shorter than two periods ({period})")
    if loess_span < 3 or loess_span % 2 == 0:
        raise InvalidArgument("loess_span must be an odd integer >= 3")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("signal must be finite")
    fit = STL(x, period=period, seasonal=int(loess_span), robust=True).fit(inner_iter=2, outer_iter=1)
    trend = np.asarray(fit.trend, dtype=np.float64)
    seasonal = np.asarray(fit.seasonal, dtype=np.float64)
    return StlComponents(trend, seasonal, x - trend - seasonal, period)


def harmonic_peak_amplitudes(spec: Spectrogram, f0_hz: float, n_harmonics: int) -> np.ndarray:
    """Time-averaged magnitude at the bin nearest each multiple of ``f0_hz``."""
    if f0_hz <= 0 or n_harmonics < 1:
        raise InvalidArgument("f0_hz and n_harmonics must be positive")
    if not n_harmonics * f0_hz < spec.sample_rate_hz / 2:
        raise InvalidArgument(f"harmonic {n_harmonics} of {f0_hz} Hz is above Nyquist")
    mag = np.hypot(spec.real_part, spec.imag_part).mean(axis=1)
    k = np.arange(1, n_harmonics + 1)
    bins = np.minimum(np.rint(k * f0_hz / spec.bin_hz).astype(int), spec.n_bins - 1)
    return mag[bins]
