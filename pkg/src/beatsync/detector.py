"""Monte Carlo time-tag generation for a gated (or free-running) photon receiver.

The transmitter emits one pulse per round of its own, possibly drifting, clock.  The
receiver opens gates on an independent clock.  Rather than touching every round, the
simulator draws the rounds that *could* click (thinning at the largest per-round
click probability) and only evaluates jitter, intensity and gate membership for
those.  Dark counts are drawn per gate, and dead time plus afterpulsing are applied
in a single compiled pass over the time-sorted primaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .core import (
    FS_PER_S,
    INT64_MAX,
    STREAM_AFTERPULSE,
    STREAM_DARK,
    STREAM_DETECT,
    STREAM_DRIFT_FAST,
    STREAM_DRIFT_SLOW,
    STREAM_INTENSITY,
    STREAM_JITTER,
    ClockState,
    DetectorParams,
    ProtocolParams,
    RngHandle,
    TimeTagSeries,
)

CAUSE_QUBIT = _kernels.CAUSE_QUBIT
CAUSE_DARK = _kernels.CAUSE_DARK
CAUSE_AFTERPULSE = _kernels.CAUSE_AFTERPULSE
CAUSE_NAMES = ("qubit", "dark", "afterpulse")

DEFAULT_BLOCK_ROUNDS = 1 << 16
DEFAULT_CHUNK_ROUNDS = 1 << 22


def photon_click_probs(protocol: ProtocolParams, detector: DetectorParams) -> np.ndarray:
    """Per-intensity probability that a pulse inside an open gate fires the detector."""
    mu = np.array([m for m, _ in protocol.intensities])
    return -np.expm1(-mu * protocol.channel_transmittance * detector.efficiency)


def yield_per_round(protocol: ProtocolParams, detector: DetectorParams) -> float:
    """In-gate yield ``Q``: photon or dark click, averaged over the intensity mix."""
    probs = np.array([p for _, p in protocol.intensities])
    mu = np.array([m for m, _ in protocol.intensities])
    no_click = (1.0 - detector.dark_prob) * np.exp(
        -mu * protocol.channel_transmittance * detector.efficiency
    )
    return float(np.sum(probs * (1.0 - no_click)))


def _uniform_halfwidth(var: float) -> float:
    return math.sqrt(3.0 * var)


def step_clock(
    state: ClockState, rng: RngHandle, jitter_sigma: float = 0.0
) -> tuple[ClockState, int]:
    """Emit the event at ``state.phase`` and advance the clock by one round.

    The fast and slow drift components are redrawn from centred uniforms with the
    configured variances and added to the frequency; the nominal phase then moves by
    one period of the new frequency.  Returns the new state and the jittered arrival
    time of the emitted event, ``phase + chi`` with ``chi ~ N(0, jitter_sigma^2)``.
    Jitter is not fed back into the phase.
    """
    chi = rng.fork(STREAM_JITTER).gen.standard_normal() * jitter_sigma
    arrival = state.phase + int(round(state.phase_frac + chi))
    fast = slow = 0.0
    if state.fast_drift_var > 0:
        a = _uniform_halfwidth(state.fast_drift_var)
        fast = float(rng.fork(STREAM_DRIFT_FAST).gen.uniform(-a, a))
    if state.slow_drift_var > 0:
        a = _uniform_halfwidth(state.slow_drift_var)
        slow = float(rng.fork(STREAM_DRIFT_SLOW).gen.uniform(-a, a))
    f = state.f + fast + slow
    if not f > 0:
        raise ValueError(f"clock frequency became non-positive ({f} Hz)")
    frac = state.phase_frac + FS_PER_S / f
    whole = math.floor(frac)
    new = replace(
        state,
        f=f,
        phase=state.phase + whole,
        phase_frac=frac - whole,
        fast_component=fast,
        slow_component=slow,
    )
    return new, arrival


def frequency_path(state: ClockState, n: int, rng: RngHandle) -> np.ndarray:
    """Frequencies after each of ``n`` successive ``step_clock`` calls (same draws)."""
    f = np.full(n, 0.0)
    if state.fast_drift_var > 0:
        a = _uniform_halfwidth(state.fast_drift_var)
        f += rng.fork(STREAM_DRIFT_FAST).gen.uniform(-a, a, size=n)
    if state.slow_drift_var > 0:
        a = _uniform_halfwidth(state.slow_drift_var)
        f += rng.fork(STREAM_DRIFT_SLOW).gen.uniform(-a, a, size=n)
    return state.f + np.cumsum(f)


def _split_period(tau: float) -> tuple[int, float]:
    whole = math.floor(tau)
    return whole, tau - whole


def _open(offsets: np.ndarray, gate_width: int) -> np.ndarray:
    twice = 2 * offsets
    return (twice >= -gate_width) & (twice < gate_width)


@dataclass(frozen=True)
class GateSchedule:
    """Receiver gates: gate ``n`` is centred at ``delay + n / f_B`` (fs).

    A gate is open on ``[centre - T_g/2, centre + T_g/2)``.
    """

    f_B: float
    delay: int = 0
    gate_width: int = 1_000_000
    mode: str = "gated"

    def __post_init__(self):
        if self.mode not in ("gated", "free_running"):
            raise ValueError(f"mode must be 'gated' or 'free_running', got {self.mode!r}")
        if not self.f_B > 0:
            raise ValueError("f_B must be positive")

    @property
    def period(self) -> float:
        return FS_PER_S / self.f_B

    def segment(self) -> "GateSegment":
        return GateSegment.from_period(-INT64_MAX, 0, self.delay, self.period)

    def centre(self, n):
        return self.segment().centre(n)

    def offsets(self, times) -> np.ndarray:
        """Signed distance (fs) from each time to its nearest gate centre."""
        return self.segment().offsets(np.asarray(times, np.int64))

    def contains(self, times) -> np.ndarray:
        if self.mode == "free_running":
            return np.ones(np.shape(times), bool)
        return _open(self.offsets(times), self.gate_width)


@dataclass(frozen=True)
class GateSegment:
    """Gate centres ``ref + (n - n_ref) * tau`` valid for times ``>= start``."""

    start: int
    n_ref: int
    ref: int
    tau_int: int
    tau_frac: float

    @classmethod
    def from_period(cls, start, n_ref, ref, tau):
        ti, tf = _split_period(tau)
        return cls(int(start), int(n_ref), int(ref), ti, tf)

    @property
    def tau(self) -> float:
        return self.tau_int + self.tau_frac

    def centre(self, n):
        d = np.asarray(n, np.int64) - self.n_ref
        c = self.ref + d * self.tau_int + np.rint(d * self.tau_frac).astype(np.int64)
        return int(c) if np.ndim(c) == 0 else c

    def nearest_index(self, times: np.ndarray) -> np.ndarray:
        rel = (times - self.ref).astype(np.float64)
        return self.n_ref + np.rint(rel / self.tau).astype(np.int64)

    def offsets(self, times: np.ndarray) -> np.ndarray:
        return times - self.centre(self.nearest_index(times))

    def first_index_at_or_after(self, t: int) -> int:
        n = int(self.n_ref + math.ceil((t - self.ref) / self.tau))
        while self.centre(n) < t:
            n += 1
        while self.centre(n - 1) >= t:
            n -= 1
        return n


def bernoulli_positions(gen: np.random.Generator, n: int, p: float) -> np.ndarray:
    """Sorted indices in ``[0, n)`` of independent Bernoulli(p) successes."""
    if n <= 0 or p <= 0:
        return np.empty(0, np.int64)
    if p >= 1:
        return np.arange(n, dtype=np.int64)
    expected = n * p
    size = int(expected + 6 * math.sqrt(expected) + 16)
    # a gap past n ends the window anyway; clipping keeps the cumsum from wrapping
    pos = np.cumsum(np.minimum(gen.geometric(p, size=size), n + 1), dtype=np.int64) - 1
    while pos[-1] < n:
        more = np.cumsum(np.minimum(gen.geometric(p, size=size), n + 1), dtype=np.int64) + pos[-1]
        pos = np.concatenate([pos, more])
    return pos[: np.searchsorted(pos, n)]


class ClockTrajectory:
    """Piecewise-constant-frequency phase model of a drifting clock.

    The frequency is held for blocks of ``block_rounds`` rounds and then moved by
    the summed drift of the block, drawn as a Gaussian with the summed variance of
    the per-round uniform increments.  Phase is tracked as integer fs plus a
    fractional remainder, so a rigid clock is exact to sub-fs over any horizon.
    """

    def __init__(self, clock: ClockState, rng: RngHandle, block_rounds: int = DEFAULT_BLOCK_ROUNDS):
        self.clock0 = clock
        self.round = 0
        self.t_int = int(clock.phase)
        self.t_frac = float(clock.phase_frac)
        self.f = float(clock.f)
        self.fast = clock.fast_component
        self.slow = clock.slow_component
        self.block_rounds = int(block_rounds) if clock.drifting else None
        self._block = 0
        self._rng_fast = rng.fork(STREAM_DRIFT_FAST)
        self._rng_slow = rng.fork(STREAM_DRIFT_SLOW)

    def _drift(self) -> None:
        b = self.block_rounds
        fast = slow = 0.0
        if self.clock0.fast_drift_var > 0:
            fast = self._rng_fast.gen.normal(0.0, math.sqrt(b * self.clock0.fast_drift_var))
        if self.clock0.slow_drift_var > 0:
            slow = self._rng_slow.gen.normal(0.0, math.sqrt(b * self.clock0.slow_drift_var))
        self.fast, self.slow = fast / b, slow / b
        self.f += fast + slow
        if not self.f > 0:
            raise ValueError("clock frequency became non-positive")

    def advance(self, n: int):
        """Consume ``n`` rounds; returns per-block arrays (start, length, tau, t_int, t_frac, f)."""
        starts, lengths, taus, tints, tfracs, fs = [], [], [], [], [], []
        end = self.round + n
        while self.round < end:
            if self.block_rounds is None:
                stop = end
            else:
                block = self.round // self.block_rounds
                if block > self._block:
                    self._drift()
                    self._block = block
                stop = min(end, (block + 1) * self.block_rounds)
            tau = FS_PER_S / self.f
            length = stop - self.round
            starts.append(self.round)
            lengths.append(length)
            taus.append(tau)
            tints.append(self.t_int)
            tfracs.append(self.t_frac)
            fs.append(self.f)
            ti, tf = _split_period(tau)
            frac = self.t_frac + length * tf
            carry = math.floor(frac)
            self.t_int += length * ti + carry
            self.t_frac = frac - carry
            self.round = stop
        return (
            np.array(starts, np.int64),
            np.array(lengths, np.int64),
            np.array(taus),
            np.array(tints, np.int64),
            np.array(tfracs),
            np.array(fs),
        )

    @property
    def now(self) -> int:
        """Nominal time of the next (not yet consumed) round."""
        return self.t_int + int(round(self.t_frac))

    def state(self) -> ClockState:
        return replace(
            self.clock0,
            f=self.f,
            phase=self.t_int,
            phase_frac=self.t_frac,
            fast_component=self.fast,
            slow_component=self.slow,
        )


def nominal_times(blocks, pos: np.ndarray) -> np.ndarray:
    """Nominal emission times for local round offsets ``pos`` within ``blocks``."""
    starts, _, taus, tints, tfracs, _ = blocks
    local0 = starts - starts[0]
    b = np.searchsorted(local0, pos, side="right") - 1
    d = pos - local0[b]
    whole = np.floor(taus)
    return tints[b] + d * whole.astype(np.int64)[b] + np.rint(tfracs[b] + d * (taus - whole)[b]).astype(np.int64)


@dataclass
class SimRunResult:
    tags: TimeTagSeries
    causes: np.ndarray
    rounds: np.ndarray
    final_clock_a: ClockState
    suppressed: dict = field(default_factory=dict)
    candidates: int = 0
    true_emission_times: np.ndarray | None = None

    def count(self, cause: int) -> int:
        return int(np.count_nonzero(self.causes == cause))


class Simulator:
    """Resumable simulation of one transmitter/receiver pair.

    ``run(n)`` produces the tags of the next ``n`` rounds.  Tags stay time-sorted
    across calls; afterpulses and events jittered past the end of a call are held
    back and released by the next call (or by ``run(..., flush=True)``).
    ``retune`` replaces the receiver's gate frequency and shifts its gate phase from
    the current time on, which is how a tracking loop acts on the receiver.
    """

    def __init__(
        self,
        protocol: ProtocolParams,
        detector: DetectorParams,
        gates: GateSchedule,
        clock_a: ClockState,
        rng: RngHandle,
        *,
        block_rounds: int = DEFAULT_BLOCK_ROUNDS,
        chunk_rounds: int = DEFAULT_CHUNK_ROUNDS,
    ):
        self.protocol = protocol
        self.detector = detector
        self.mode = gates.mode
        self.gate_width = gates.gate_width
        self.segments = [gates.segment()]
        self.trajectory = ClockTrajectory(clock_a, rng, block_rounds)
        self.chunk_rounds = int(chunk_rounds)
        self._rng_detect = rng.fork(STREAM_DETECT).gen
        self._rng_intensity = rng.fork(STREAM_INTENSITY).gen
        self._rng_jitter = rng.fork(STREAM_JITTER).gen
        self._rng_ap = rng.fork(STREAM_AFTERPULSE).gen
        self._rng_dark = rng.fork(STREAM_DARK).gen
        self._det_state = _kernels.new_detector_state()
        self._carry = (np.empty(0, np.int64), np.empty(0, np.uint8), np.empty(0, np.int64))
        self.suppressed = np.zeros(3, np.int64)
        self.candidates = 0

        self._click = photon_click_probs(protocol, detector)
        self._intensity_p = np.array([p for _, p in protocol.intensities])
        self._p_max = float(self._click.max()) if self._click.size else 0.0
        self._single = np.count_nonzero(self._intensity_p) <= 1 or np.allclose(
            self._click[self._intensity_p > 0], self._p_max
        )
        self._p_single = float(np.sum(self._intensity_p * self._click))

    # -- receiver gates -------------------------------------------------------------

    @property
    def gate_segment(self) -> GateSegment:
        return self.segments[-1]

    def gate_centre(self, n):
        """Centre of receiver gate ``n`` under the current gate segment."""
        return self.gate_segment.centre(n)

    def retune(self, f_B: float, shift: int = 0) -> None:
        """From the current time on, gate at ``f_B`` and move gate centres by ``shift`` fs."""
        now = self.trajectory.now
        seg = self.gate_segment
        n0 = seg.first_index_at_or_after(now)
        new = GateSegment.from_period(now, n0, seg.centre(n0) + int(shift), FS_PER_S / f_B)
        self.segments.append(new)

    def _segment_index(self, times: np.ndarray) -> np.ndarray:
        starts = np.array([s.start for s in self.segments], np.int64)
        return np.searchsorted(starts, times, side="right") - 1

    def _in_gate(self, times: np.ndarray) -> np.ndarray:
        if self.mode == "free_running" or times.size == 0:
            return np.ones(times.shape, bool)
        if len(self.segments) == 1:
            return _open(self.segments[0].offsets(times), self.gate_width)
        idx = self._segment_index(times)
        keep = np.zeros(times.shape, bool)
        for k in np.unique(idx):
            sel = idx == k
            keep[sel] = _open(self.segments[k].offsets(times[sel]), self.gate_width)
        return keep

    def _dark_counts(self, lo: int, hi: int):
        p = self.detector.dark_prob
        times, rounds = [], []
        for k, seg in enumerate(self.segments):
            seg_hi = self.segments[k + 1].start if k + 1 < len(self.segments) else hi
            a, b = max(lo, seg.start), min(hi, seg_hi)
            if a >= b:
                continue
            n_lo = seg.first_index_at_or_after(a)
            n_hi = seg.first_index_at_or_after(b)
            pos = bernoulli_positions(self._rng_dark, n_hi - n_lo, p)
            if pos.size == 0:
                continue
            n = n_lo + pos
            width = self.gate_width if self.mode == "gated" else seg.tau
            off = (self._rng_dark.random(pos.size) - 0.5) * width
            times.append(seg.centre(n) + np.rint(off).astype(np.int64))
            rounds.append(n)
        if not times:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        return np.concatenate(times), np.concatenate(rounds)

    # -- main loop --------------------------------------------------------------------

    def _chunk(self, m: int, flush: bool):
        traj = self.trajectory
        j0 = traj.round
        lo = traj.now
        blocks = traj.advance(m)
        hi = traj.now

        pos = bernoulli_positions(self._rng_detect, m, self._p_max)
        if pos.size and not self._single:
            which = self._rng_intensity.choice(self._intensity_p.size, size=pos.size, p=self._intensity_p)
            accept = self._rng_detect.random(pos.size) * self._p_max < self._click[which]
            pos = pos[accept]
        elif pos.size and self._p_single < self._p_max:
            pos = pos[self._rng_detect.random(pos.size) * self._p_max < self._p_single]
        self.candidates += int(pos.size)
        nominal = nominal_times(blocks, pos)
        chi = self._rng_jitter.standard_normal(pos.size) * self.detector.jitter_sigma
        arrival = nominal + np.rint(chi).astype(np.int64)
        keep = self._in_gate(arrival)
        q_t, q_r = arrival[keep], j0 + pos[keep]

        d_t, d_r = self._dark_counts(lo, hi)

        c_t, c_c, c_r = self._carry
        t = np.concatenate([c_t, q_t, d_t])
        c = np.concatenate([c_c, np.full(q_t.size, CAUSE_QUBIT, np.uint8), np.full(d_t.size, CAUSE_DARK, np.uint8)])
        r = np.concatenate([c_r, q_r, d_r])
        order = np.argsort(t, kind="stable")
        t, c, r = t[order], c[order], r[order]
        if flush:
            cut = t.size
        else:
            cut = int(np.searchsorted(t, hi, side="left"))
        self._carry = (t[cut:], c[cut:], r[cut:])
        t, c, r = t[:cut], c[:cut], r[:cut]

        u_ap = self._rng_ap.random(t.size)
        eps = np.rint(self._rng_ap.exponential(1.0 / self.detector.afterpulse_lambda, t.size)).astype(np.int64)
        tags, causes, rounds, supp = _kernels.detector_pass(
            t, c, r, u_ap, eps, self.detector.afterpulse_prob, self.detector.dead_time,
            self._det_state, flush=flush,
        )
        self.suppressed += supp
        return tags, causes, rounds

    def run(self, n_rounds: int, flush: bool = False) -> SimRunResult:
        if n_rounds <= 0:
            raise ValueError("n_rounds must be positive")
        horizon = self.trajectory.now + (n_rounds + 1) * (FS_PER_S / self.trajectory.f) * 1.01
        if horizon >= INT64_MAX:
            raise OverflowError("simulation horizon exceeds the int64 femtosecond time base")
        out_t, out_c, out_r = [], [], []
        left = n_rounds
        while left:
            m = min(left, self.chunk_rounds)
            left -= m
            t, c, r = self._chunk(m, flush=flush and not left)
            out_t.append(t)
            out_c.append(c)
            out_r.append(r)
        tags = np.concatenate(out_t)
        causes = np.concatenate(out_c)
        rounds = np.concatenate(out_r)
        emission = None
        if self.trajectory.block_rounds is None:
            clk = self.trajectory.clock0
            ti, tf = _split_period(clk.period)
            emission = np.where(
                causes == CAUSE_QUBIT,
                clk.phase + rounds * ti + np.rint(clk.phase_frac + rounds * tf).astype(np.int64),
                np.iinfo(np.int64).min,
            )
        return SimRunResult(
            tags=TimeTagSeries(tags, "beatsync.simulate"),
            causes=causes,
            rounds=rounds,
            final_clock_a=self.trajectory.state(),
            suppressed=dict(zip(CAUSE_NAMES, self.suppressed.tolist())),
            candidates=self.candidates,
            true_emission_times=emission,
        )


def simulate(
    protocol: ProtocolParams,
    detector: DetectorParams,
    gates: GateSchedule,
    clock_a: ClockState,
    n_rounds: int,
    rng: RngHandle,
    **kw,
) -> SimRunResult:
    """Simulate ``n_rounds`` transmitter rounds and return the complete tag record."""
    if n_rounds <= 0:
        raise ValueError("n_rounds must be positive")
    sim = Simulator(protocol, detector, gates, clock_a, rng, **kw)
    return sim.run(n_rounds, flush=True)
