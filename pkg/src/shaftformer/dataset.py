"""Vibration records: synthetic generation, splitting, gap masking and file I/O."""

from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from shaftformer.errors import InvalidArgument, InvariantViolation, ParseError


class FlawLevel(str, enum.Enum):
    D0 = "D0"
    D1 = "D1"
    D2 = "D2"
    D3 = "D3"


class Rotation(str, enum.Enum):
    CLOCKWISE = "clockwise"
    COUNTERCLOCKWISE = "counterclockwise"


class SensorSide(str, enum.Enum):
    LHS = "LHS"
    RHS = "RHS"


class SensorOrientation(str, enum.Enum):
    LENGTHWISE = "lengthwise"
    VERTICAL = "vertical"


# Machined crack depths per flaw level, in mm.
CRACK_DEPTH_MM = {
    FlawLevel.D0: 0.0,
    FlawLevel.D1: 5.7,
    FlawLevel.D2: 10.9,
    FlawLevel.D3: 15.0,
}
AXLE_DIAMETER_MM = 170.0
DEFAULT_LOADS_T = (4.0, 10.0)
DEFAULT_SPEEDS_KMH = (20.0, 50.0)

CONDITION_FIELDS = (
    "flaw_level",
    "crack_depth_mm",
    "load_tonnes",
    "speed_kmh",
    "rotation",
    "sensor_side",
    "sensor_orientation",
)
CSV_HEADER = ("record_id", "sample_rate_hz") + CONDITION_FIELDS
N_CONDITION_FEATURES = 10


@dataclass(frozen=True)
class TestCondition:
    """Operating and damage state of one tested axle."""

    __test__ = False  # not a pytest class

    flaw_level: FlawLevel = FlawLevel.D0
    crack_depth_mm: float | None = None
    load_tonnes: float = 4.0
    speed_kmh: float = 20.0
    rotation: Rotation = Rotation.CLOCKWISE
    sensor_side: SensorSide = SensorSide.RHS
    sensor_orientation: SensorOrientation = SensorOrientation.VERTICAL

    def __post_init__(self):
        try:
            flaw = FlawLevel(self.flaw_level)
            rotation = Rotation(self.rotation)
            side = SensorSide(self.sensor_side)
            orientation = SensorOrientation(self.sensor_orientation)
        except ValueError as exc:
            raise InvariantViolation(str(exc)) from None
        object.__setattr__(self, "flaw_level", flaw)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "sensor_side", side)
        object.__setattr__(self, "sensor_orientation", orientation)
        expected = CRACK_DEPTH_MM[flaw]
        depth = expected if self.crack_depth_mm is None else float(self.crack_depth_mm)
        if abs(depth - expected) > 1e-9:
            raise InvariantViolation(
                f"crack_depth_mm={depth} does not match flaw level {flaw.value} ({expected} mm)"
            )
        object.__setattr__(self, "crack_depth_mm", depth)
        object.__setattr__(self, "load_tonnes", float(self.load_tonnes))
        object.__setattr__(self, "speed_kmh", float(self.speed_kmh))
        if not (self.load_tonnes > 0 and math.isfinite(self.load_tonnes)):
            raise InvariantViolation(f"load_tonnes must be positive, got {self.load_tonnes}")
        if not (self.speed_kmh > 0 and math.isfinite(self.speed_kmh)):
            raise InvariantViolation(f"speed_kmh must be positive, got {self.speed_kmh}")

    def as_dict(self) -> dict:
        return {
            "flaw_level": self.flaw_level.value,
            "crack_depth_mm": self.crack_depth_mm,
            "load_tonnes": self.load_tonnes,
            "speed_kmh": self.speed_kmh,
            "rotation": self.rotation.value,
            "sensor_side": self.sensor_side.value,
            "sensor_orientation": self.sensor_orientation.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TestCondition":
        return cls(**{k: d[k] for k in CONDITION_FIELDS})


def condition_features(condition: TestCondition) -> np.ndarray:
    """Fixed-length numeric encoding used by the conditioning embeddings."""
    onehot = np.zeros(4)
    onehot[list(FlawLevel).index(condition.flaw_level)] = 1.0
    return np.concatenate(
        [
            onehot,
            [
                condition.crack_depth_mm / AXLE_DIAMETER_MM,
                condition.load_tonnes / 10.0,
                condition.speed_kmh / 50.0,
                1.0 if condition.rotation is Rotation.CLOCKWISE else -1.0,
                1.0 if condition.sensor_side is SensorSide.RHS else -1.0,
                1.0 if condition.sensor_orientation is SensorOrientation.VERTICAL else -1.0,
            ],
        ]
    )


@dataclass(frozen=True, eq=False)
class VibrationRecord:
    """One acceleration series. ``mask`` is True where a sample was observed."""

    samples: np.ndarray
    sample_rate_hz: float
    condition: TestCondition
    record_id: str
    mask: np.ndarray | None = None

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        object.__setattr__(self, "record_id", str(self.record_id))
        if samples.size == 0:
            raise InvariantViolation("samples must be non-empty", self.record_id)
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise InvariantViolation("sample_rate_hz must be positive", self.record_id)
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool).reshape(-1)
            if mask.shape != samples.shape:
                raise InvariantViolation(
                    f"mask length {mask.size} != samples length {samples.size}", self.record_id
                )
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)
        if not np.all(np.isfinite(samples[self.observed])):
            raise InvariantViolation("non-finite value at an observed position", self.record_id)

    def __len__(self):
        return self.samples.size

    @property
    def observed(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.samples.size, dtype=bool)
        return self.mask

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def __eq__(self, other):
        if not isinstance(other, VibrationRecord):
            return NotImplemented
        if (self.mask is None) != (other.mask is None):
            return False
        if self.mask is not None and not np.array_equal(self.mask, other.mask):
            return False
        return (
            self.record_id == other.record_id
            and self.sample_rate_hz == other.sample_rate_hz
            and self.condition == other.condition
            and np.array_equal(self.samples, other.samples, equal_nan=True)
        )

    __hash__ = None


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int
    ratios: tuple = (0.7, 0.2, 0.1)

    def buckets(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the harmonic generator.

    Harmonic ``k`` has base amplitude ``1/k**2`` and grows with the relative
    crack depth as ``1 + severity_gain * k * depth / axle_diameter``.
    """

    wheel_diameter_m: float = 0.92
    axle_diameter_mm: float = AXLE_DIAMETER_MM
    severity_gain: float = 8.0
    n_harmonics: int = 5
    base_decay: float = 2.0
    load_amplitude_gain: float = 0.05  # per tonne above 4 t
    load_noise_gain: float = 0.03
    side_amplitude: dict = field(default_factory=lambda: {"LHS": 0.9, "RHS": 1.0})
    orientation_amplitude: dict = field(
        default_factory=lambda: {"lengthwise": 0.6, "vertical": 1.0}
    )
    orientation_noise: dict = field(default_factory=lambda: {"lengthwise": 1.2, "vertical": 1.0})


DEFAULT_SYNTH = SynthConfig()


def fundamental_hz(speed_kmh: float, wheel_diameter_m: float = 0.92) -> float:
    """Wheelset rotation frequency for a rolling speed."""
    return (speed_kmh / 3.6) / (math.pi * wheel_diameter_m)


def severity_gain(condition: TestCondition, config: SynthConfig = DEFAULT_SYNTH) -> np.ndarray:
    k = np.arange(1, config.n_harmonics + 1)
    return 1.0 + config.severity_gain * k * condition.crack_depth_mm / config.axle_diameter_mm


def _amplitude_multiplier(condition, config):
    load = 1.0 + config.load_amplitude_gain * (condition.load_tonnes - 4.0)
    return (
        max(load, 0.0)
        * config.side_amplitude[condition.sensor_side.value]
        * config.orientation_amplitude[condition.sensor_orientation.value]
    )


def _noise_multiplier(condition, config):
    load = 1.0 + config.load_noise_gain * (condition.load_tonnes - 4.0)
    return max(load, 0.0) * config.orientation_noise[condition.sensor_orientation.value]


def base_amplitudes(condition: TestCondition, config: SynthConfig = DEFAULT_SYNTH) -> np.ndarray:
    """Healthy-axle harmonic amplitudes for the operating condition."""
    k = np.arange(1, config.n_harmonics + 1)
    return _amplitude_multiplier(condition, config) / k**config.base_decay


def harmonic_amplitudes(condition: TestCondition, config: SynthConfig = DEFAULT_SYNTH) -> np.ndarray:
    return base_amplitudes(condition, config) * severity_gain(condition, config)


def _check_nyquist(f0, sample_rate_hz, n_harmonics):
    if not f0 < sample_rate_hz / (2 * n_harmonics):
        raise InvalidArgument(
            f"{n_harmonics} harmonics of {f0:.4g} Hz exceed Nyquist at {sample_rate_hz} Hz"
        )


def _harmonic_sum(amps, f0, t, phases):
    k = np.arange(1, amps.size + 1)
    return np.cos(2 * np.pi * f0 * np.outer(t, k) + phases) @ amps


def synth_record(
    condition: TestCondition,
    duration_s: float,
    sample_rate_hz: float,
    noise_std: float,
    seed: int,
    config: SynthConfig = DEFAULT_SYNTH,
    record_id: str | None = None,
) -> VibrationRecord:
    """Generate a crack-conditioned harmonic vibration record.

    The record is normalized with the mean and standard deviation of its
    healthy counterpart (same seed, phases and noise, zero crack depth), so D0
    records come out exactly z-scored while cracked records keep their extra
    harmonic energy.
    """
    if not (duration_s > 0 and sample_rate_hz > 0):
        raise InvalidArgument("duration_s and sample_rate_hz must be positive")
    if noise_std < 0:
        raise InvalidArgument("noise_std must be non-negative")
    n = int(round(duration_s * sample_rate_hz))
    if n < 64:
        raise InvalidArgument(f"record would have {n} samples; at least 64 required")
    f0 = fundamental_hz(condition.speed_kmh, config.wheel_diameter_m)
    _check_nyquist(f0, sample_rate_hz, config.n_harmonics)

    rng = np.random.default_rng(seed)
    sign = 1.0 if condition.rotation is Rotation.CLOCKWISE else -1.0
    phases = sign * rng.uniform(0.0, 2 * np.pi, config.n_harmonics)
    noise = rng.standard_normal(n) * noise_std * _noise_multiplier(condition, config)
    t = np.arange(n) / sample_rate_hz

    healthy = _harmonic_sum(base_amplitudes(condition, config), f0, t, phases) + noise
    cracked = _harmonic_sum(harmonic_amplitudes(condition, config), f0, t, phases) + noise
    scale = healthy.std()
    samples = (cracked - healthy.mean()) / scale
    if record_id is None:
        record_id = f"synth-{condition.flaw_level.value}-{seed}"
    return VibrationRecord(samples, sample_rate_hz, condition, record_id)


def reference_template(
    condition: TestCondition,
    n_samples: int,
    sample_rate_hz: float,
    start: int = 0,
    config: SynthConfig = DEFAULT_SYNTH,
) -> np.ndarray:
    """Noise-free zero-phase harmonic template standing in for a simulated signal.

    ``start`` is the absolute sample index of the first output value, so
    templates for consecutive windows line up.
    """
    f0 = fundamental_hz(condition.speed_kmh, config.wheel_diameter_m)
    _check_nyquist(f0, sample_rate_hz, config.n_harmonics)
    t = (start + np.arange(n_samples)) / sample_rate_hz
    healthy = base_amplitudes(condition, config)
    scale = math.sqrt(float(np.sum(healthy**2)) / 2.0)
    return _harmonic_sum(harmonic_amplitudes(condition, config), f0, t, 0.0) / scale


def factorial_conditions() -> list[TestCondition]:
    """All tested combinations, flaw level varying fastest."""
    out = []
    for rotation, side, orientation, load, speed, flaw in itertools.product(
        Rotation, SensorSide, reversed(list(SensorOrientation)), DEFAULT_LOADS_T,
        DEFAULT_SPEEDS_KMH, FlawLevel,
    ):
        out.append(TestCondition(flaw, None, load, speed, rotation, side, orientation))
    return out


def synth_dataset(
    n_records: int = 48,
    duration_s: float = 16.0,
    sample_rate_hz: float = 64.0,
    noise_std: float = 0.1,
    seed: int = 0,
    config: SynthConfig = DEFAULT_SYNTH,
) -> list[VibrationRecord]:
    conditions = factorial_conditions()
    records = []
    for i in range(n_records):
        cond = conditions[i % len(conditions)]
        rid = f"rec{i:04d}-{cond.flaw_level.value}"
        records.append(
            synth_record(cond, duration_s, sample_rate_hz, noise_std, seed * 100003 + i, config, rid)
        )
    return records


def zscore(record: VibrationRecord) -> VibrationRecord:
    obs = record.observed
    values = record.samples[obs]
    std = values.std()
    if std == 0:
        raise InvariantViolation("cannot z-score a constant record", record.record_id)
    samples = record.samples.copy()
    samples[obs] = (values - values.mean()) / std
    return replace(record, samples=samples)


# ---------------------------------------------------------------------------
# splitting and masking


def split_dataset(records: Sequence[VibrationRecord], ratios=(0.7, 0.2, 0.1), seed: int = 0) -> DatasetSplit:
    """Shuffled train/validation/test partition (largest-remainder sizing)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidArgument(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(records)
    if n < 3:
        raise InvalidArgument(f"need at least 3 records to split, got {n}")
    ids = [r.record_id for r in records]
    if len(set(ids)) != n:
        raise InvalidArgument("record_ids must be unique")

    exact = [r * n for r in ratios]
    sizes = [int(math.floor(e)) for e in exact]
    leftovers = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in leftovers[: n - sum(sizes)]:
        sizes[i] += 1

    order = np.random.default_rng(seed).permutation(n)
    shuffled = [records[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(shuffled[:a], shuffled[a:b], shuffled[b:], int(seed), ratios)


def mask_gaps(
    record: VibrationRecord,
    gap_fraction: float,
    gap_count: int,
    seed: int,
    protect_head: int = 0,
) -> VibrationRecord:
    """Hide ``gap_count`` disjoint contiguous runs totalling ``round(gap_fraction * len)``.

    Runs are separated by at least one observed sample. Hidden positions are set
    to NaN. The first ``protect_head`` samples are never masked.
    """
    n = len(record)
    if not 0.0 < gap_fraction < 1.0:
        raise InvalidArgument(f"gap_fraction must lie in (0, 1), got {gap_fraction}")
    if gap_count < 1:
        raise InvalidArgument("gap_count must be positive")
    total = int(round(gap_fraction * n))
    if total < gap_count:
        raise InvalidArgument(f"{total} masked samples cannot form {gap_count} gaps")
    span = n - protect_head
    free = span - total - (gap_count - 1)
    if free < 0:
        raise InvalidArgument("gaps cannot fit without overlap")

    q, r = divmod(total, gap_count)
    lengths = [q + 1 if i < r else q for i in range(gap_count)]
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(free + gap_count, size=gap_count, replace=False))
    mask = record.observed.copy()
    offset = protect_head
    for i, (p, length) in enumerate(zip(picks, lengths)):
        start = offset + int(p) - i
        mask[start : start + length] = False
        offset += length + 1
    samples = record.samples.copy()
    samples[~mask] = np.nan
    return replace(record, samples=samples, mask=mask)


def mask_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open ``(start, stop)`` intervals where ``mask`` is False."""
    hidden = np.concatenate([[False], ~np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(hidden.astype(np.int8)))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


# ---------------------------------------------------------------------------
# file I/O


def atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_records(records: Iterable[VibrationRecord], path, format: str = "csv"):
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for rec in records:
            c = rec.condition.as_dict()
            w.writerow(CSV_HEADER)
            w.writerow([rec.record_id, repr(rec.sample_rate_hz)] + [
                repr(c[k]) if isinstance(c[k], float) else c[k] for k in CONDITION_FIELDS
            ])
            masked = rec.mask is not None
            w.writerow(("t", "value", "observed") if masked else ("t", "value"))
            for i, v in enumerate(rec.samples):
                row = [repr(i / rec.sample_rate_hz), repr(float(v))]
                if masked:
                    row.append("1" if rec.mask[i] else "0")
                w.writerow(row)
        atomic_write(path, buf.getvalue())
    elif format == "jsonl":
        lines = []
        for rec in records:
            obs = rec.observed
            lines.append(json.dumps({
                "record_id": rec.record_id,
                "sample_rate_hz": rec.sample_rate_hz,
                "condition": rec.condition.as_dict(),
                "samples": [float(v) if o else None for v, o in zip(rec.samples, obs)],
                "mask": None if rec.mask is None else [bool(m) for m in rec.mask],
            }))
        atomic_write(path, "".join(line + "\n" for line in lines))
    else:
        raise InvalidArgument(f"unknown format {format!r}")


def _build_record(record_id, sample_rate, cond_dict, samples, mask):
    try:
        condition = TestCondition.from_dict(cond_dict)
        return VibrationRecord(samples, sample_rate, condition, record_id, mask)
    except InvariantViolation as exc:
        if exc.record_id is None:
            raise InvariantViolation(str(exc), record_id) from None
        raise


def _parse_float(text, line, field_name):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ParseError(f"not a number: {text!r}", line, field_name) from None


def _read_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    records = []
    i = 0
    while i < len(rows):
        if not rows[i] or all(not cell.strip() for cell in rows[i]):
            i += 1
            continue
        if tuple(rows[i]) != CSV_HEADER:
            raise ParseError("expected record header", i + 1, rows[i][0] if rows[i] else None)
        if i + 2 >= len(rows):
            raise ParseError("truncated record section", i + 1)
        meta = rows[i + 1]
        if len(meta) != len(CSV_HEADER):
            raise ParseError(f"expected {len(CSV_HEADER)} metadata fields, got {len(meta)}", i + 2)
        meta = dict(zip(CSV_HEADER, meta))
        rate = _parse_float(meta["sample_rate_hz"], i + 2, "sample_rate_hz")
        cond = {k: meta[k] for k in CONDITION_FIELDS}
        for k in ("crack_depth_mm", "load_tonnes", "speed_kmh"):
            cond[k] = _parse_float(cond[k], i + 2, k)
        sub = tuple(rows[i + 2])
        if sub not in (("t", "value"), ("t", "value", "observed")):
            raise ParseError("expected 't,value[,observed]' header", i + 3)
        has_mask = len(sub) == 3
        j = i + 3
        values, observed = [], []
        while j < len(rows) and rows[j] and tuple(rows[j]) != CSV_HEADER:
            row = rows[j]
            if len(row) != len(sub):
                raise ParseError(f"expected {len(sub)} fields, got {len(row)}", j + 1)
            values.append(_parse_float(row[1], j + 1, "value"))
            if has_mask:
                if row[2] not in ("0", "1"):
                    raise ParseError(f"observed flag must be 0 or 1, got {row[2]!r}", j + 1, "observed")
                observed.append(row[2] == "1")
            j += 1
        if not values:
            raise InvariantViolation("record has no samples", meta["record_id"])
        records.append(_build_record(meta["record_id"], rate, cond, values,
                                     observed if has_mask else None))
        i = j
    return records


def _read_jsonl(text):
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
        for key in ("record_id", "sample_rate_hz", "condition", "samples"):
            if key not in obj:
                raise ParseError("missing field", lineno, key)
        cond = obj["condition"]
        missing = [k for k in CONDITION_FIELDS if k not in cond]
        if missing:
            raise ParseError("missing condition field", lineno, missing[0])
        samples = [np.nan if v is None else v for v in obj["samples"]]
        try:
            samples = np.asarray(samples, dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError("samples must be numbers or null", lineno, "samples") from None
        if samples.size == 0:
            raise InvariantViolation("record has no samples", obj["record_id"])
        records.append(_build_record(obj["record_id"], obj["sample_rate_hz"], cond, samples,
                                     obj.get("mask")))
    return records


def read_records(path, format: str | None = None, normalize: bool = False) -> list[VibrationRecord]:
    """Load records from CSV or JSONL, validating every invariant.

    With ``normalize=True`` each record is z-scored over its observed samples.
    """
    path = Path(path)
    if format is None:
        format = "jsonl" if path.suffix in (".jsonl", ".json") else "csv"
    text = path.read_text()
    if format == "csv":
        records = _read_csv(text)
    elif format == "jsonl":
        records = _read_jsonl(text)
    else:
        raise InvalidArgument(f"unknown format {format!r}")
    if normalize:
        records = [zscore(r) for r in records]
    return records
