"""Shared domain types, the integer-femtosecond time base and the RNG contract.

Every timestamp in the package is a signed 64-bit count of femtoseconds since the
experiment origin.  Rates, frequencies and regression intermediates are floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

FS_PER_S = 10**15
INT64_MAX = np.iinfo(np.int64).max

# Named RNG streams, one per stochastic concern.
STREAM_DETECT = 1
STREAM_INTENSITY = 2
STREAM_JITTER = 3
STREAM_AFTERPULSE = 4
STREAM_DARK = 5
STREAM_DRIFT_FAST = 6
STREAM_DRIFT_SLOW = 7
STREAM_PHASE = 8


def s_to_fs(seconds: float) -> int:
    """Seconds to integer femtoseconds, rounding half to even."""
    return int(round(seconds * FS_PER_S))


def fs_to_s(fs: float) -> float:
    return fs / FS_PER_S


def period_fs(freq_hz: float) -> float:
    """Period of ``freq_hz`` in (fractional) femtoseconds."""
    return FS_PER_S / freq_hz


class TimeTagSeries:
    """Sorted detection timestamps in integer femtoseconds."""

    __slots__ = ("tags", "origin_note")

    def __init__(self, tags: Sequence[int] | np.ndarray = (), origin_note: str = ""):
        arr = np.ascontiguousarray(tags, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError("tags must be one-dimensional")
        if arr.size > 1 and np.any(arr[1:] < arr[:-1]):
            raise ValueError("tags must be sorted ascending")
        arr.setflags(write=False)
        self.tags = arr
        self.origin_note = origin_note

    def __len__(self) -> int:
        return self.tags.size

    def __iter__(self):
        return iter(self.tags.tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeTagSeries):
            return NotImplemented
        return np.array_equal(self.tags, other.tags)

    def __repr__(self) -> str:
        return f"TimeTagSeries(n={len(self)}, origin_note={self.origin_note!r})"

    def window(self, start: int, stop: int) -> "TimeTagSeries":
        """Tags in ``[start, stop)``."""
        lo, hi = np.searchsorted(self.tags, [start, stop], side="left")
        return TimeTagSeries(self.tags[lo:hi], self.origin_note)

    @property
    def span(self) -> int:
        return int(self.tags[-1] - self.tags[0]) if len(self) else 0


def as_tag_array(tags: TimeTagSeries | Sequence[int] | np.ndarray) -> np.ndarray:
    if isinstance(tags, TimeTagSeries):
        return tags.tags
    return np.asarray(tags, dtype=np.int64)


@dataclass(frozen=True)
class DetectorParams:
    """Single-photon detector model.  Times in fs, ``afterpulse_lambda`` in 1/fs."""

    efficiency: float = 0.2
    gate_width: int = 1_000_000  # 1 ns
    jitter_sigma: float = 50_000.0  # 50 ps
    dead_time: int = 1_000_000_000  # 1 us
    afterpulse_prob: float = 0.02
    afterpulse_lambda: float = 1e-8  # mean delay 100 ns
    dark_prob: float = 1e-6


@dataclass(frozen=True)
class ProtocolParams:
    """Decoy-state source: (mean photon number, probability) pairs plus channel loss."""

    intensities: tuple[tuple[float, float], ...] = ((0.15, 0.6), (0.05, 0.2), (0.0, 0.2))
    channel_transmittance: float = 1.0
    state_settings_note: str = "BB84 r/a/b settings folded into intensity only"

    def __post_init__(self):
        object.__setattr__(
            self, "intensities", tuple((float(m), float(p)) for m, p in self.intensities)
        )

    @property
    def mean_intensity(self) -> float:
        return sum(m * p for m, p in self.intensities)


@dataclass(frozen=True)
class ClockState:
    """Free-running oscillator.  ``phase`` is the nominal time of the next event.

    Drift variances are per round, in Hz^2; increments are centred uniforms.
    """

    f: float
    phase: int = 0
    phase_frac: float = 0.0
    fast_drift_var: float = 0.0
    slow_drift_var: float = 0.0
    fast_component: float = 0.0
    slow_component: float = 0.0

    @property
    def period(self) -> float:
        return period_fs(self.f)

    @property
    def drifting(self) -> bool:
        return self.fast_drift_var > 0 or self.slow_drift_var > 0


@dataclass(frozen=True)
class SampleConfig:
    """Low-rate binning of the tag record: ``bin_count`` bins of ``bin_duration`` fs."""

    sample_duration: int = FS_PER_S  # 1 s
    bin_duration: int = FS_PER_S // 1000  # 1 ms
    target_resolution: float = 1.0  # Hz

    @property
    def bin_count(self) -> int:
        return self.sample_duration // self.bin_duration

    @property
    def sampling_rate(self) -> float:
        return FS_PER_S / self.bin_duration

    @property
    def duration_s(self) -> float:
        return self.sample_duration / FS_PER_S


class RngHandle:
    """Deterministic random stream keyed by ``(seed, stream_id)``.

    The generator is created lazily and then kept, so successive draws advance one
    stream.  ``fork`` derives an independent child stream.
    """

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.key = tuple(stream_id) if isinstance(stream_id, tuple) else (int(stream_id),)
        self._gen: np.random.Generator | None = None
        self._children: dict[int, RngHandle] = {}

    @property
    def stream_id(self) -> int:
        return self.key[-1]

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def fork(self, sub_id: int) -> "RngHandle":
        """Child stream ``sub_id``; repeated calls return the same (advancing) child."""
        sub_id = int(sub_id)
        if sub_id not in self._children:
            self._children[sub_id] = RngHandle(self.seed, self.key + (sub_id,))
        return self._children[sub_id]

    def fresh(self) -> "RngHandle":
        """Same stream, rewound to its first draw."""
        return RngHandle(self.seed, self.key)

    def __repr__(self) -> str:
        return f"RngHandle(seed={self.seed}, key={self.key})"


@dataclass
class ValidationReport:
    issues: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, where: str, message: str) -> None:
        self.issues.append((where, message))

    def messages(self) -> list[str]:
        return [f"{w}: {m}" for w, m in self.issues]

    def __bool__(self) -> bool:
        return self.ok


def _check_prob(report: ValidationReport, where: str, value: float) -> None:
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        report.add(where, f"{where.split('.')[-1]} must be a probability in [0, 1], got {value}")


def validate_config(
    detector: DetectorParams,
    protocol: ProtocolParams,
    sample: SampleConfig,
    clock_a: ClockState,
    clock_b: ClockState,
) -> ValidationReport:
    """Check every type invariant; problems are collected, never raised."""
    r = ValidationReport()

    for name in ("efficiency", "afterpulse_prob", "dark_prob"):
        _check_prob(r, f"detector.{name}", getattr(detector, name))
    if detector.gate_width <= 0:
        r.add("detector.gate_width", "gate_width must be positive")
    if detector.dead_time < 0:
        r.add("detector.dead_time", "dead_time must be non-negative")
    if not detector.afterpulse_lambda > 0:
        r.add("detector.afterpulse_lambda", "afterpulse_lambda must be positive")
    if not detector.jitter_sigma >= 0:
        r.add("detector.jitter_sigma", "jitter_sigma must be non-negative")

    if not protocol.intensities:
        r.add("protocol.intensities", "at least one intensity is required")
    for i, (mu, p) in enumerate(protocol.intensities):
        if mu < 0:
            r.add(f"protocol.intensities[{i}]", f"mean photon number must be >= 0, got {mu}")
        _check_prob(r, f"protocol.intensities[{i}].prob", p)
    total = sum(p for _, p in protocol.intensities)
    if protocol.intensities and abs(total - 1.0) > 1e-9:
        r.add("protocol.intensities", f"intensity probabilities sum to {total}, not 1")
    _check_prob(r, "protocol.channel_transmittance", protocol.channel_transmittance)

    for name, clk in (("clock_a", clock_a), ("clock_b", clock_b)):
        if not clk.f > 0:
            r.add(f"{name}.f", "frequency must be positive")
        if clk.fast_drift_var < 0 or clk.slow_drift_var < 0:
            r.add(f"{name}.drift", "drift variances must be non-negative")
        if clk.fast_drift_var > 0 and clk.slow_drift_var > 1e-2 * clk.fast_drift_var * (1 + 1e-9):
            r.add(f"{name}.slow_drift_var", "slow drift variance must be <= 1e-2 x fast drift variance")

    if clock_b.f > 0 and detector.gate_width >= period_fs(clock_b.f):
        r.add("detector.gate_width", "gate_width must be shorter than the gate period 1/f_B")

    if sample.sample_duration <= 0 or sample.bin_duration <= 0:
        r.add("sample", "sample_duration and bin_duration must be positive")
    else:
        if sample.sample_duration % sample.bin_duration:
            r.add("sample.bin_duration", "sample_duration must be a whole number of bins")
        if sample.bin_count % 2:
            r.add("sample.bin_count", f"bin_count must be even, got {sample.bin_count}")
        if sample.target_resolution <= 0:
            r.add("sample.target_resolution", "target_resolution must be positive")
        elif sample.duration_s < 1.0 / sample.target_resolution * (1 - 1e-12):
            r.add(
                "sample.sample_duration",
                f"sample duration {sample.duration_s} s is shorter than 1/target_resolution",
            )
        beat = abs(clock_a.f - clock_b.f)
        if sample.sampling_rate < 2 * beat:
            r.add(
                "sample.bin_duration",
                f"Nyquist: sampling rate {sample.sampling_rate:g} Hz is below 2*|delta_f| = {2 * beat:g} Hz",
            )
    return r


def dataclass_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}
