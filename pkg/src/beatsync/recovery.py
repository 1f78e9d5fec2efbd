"""Clock frequency recovery from detection time tags.

The fast path bins the tags at a low rate, finds the beat between the transmitter
and the receiver gates in a short FFT, resolves the sign of the mismatch, and then
fine-tunes the period by regressing arrival residues on round index.  ``track``
runs only the regression stage, ``delay_scan`` finds a gate delay that sees the
signal, and ``legacy_recover`` is the high-rate occupancy-FFT baseline.

All periods, residues and thresholds are in (fractional) femtoseconds.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np
import scipy.fft

from .core import FS_PER_S, SampleConfig, TimeTagSeries, as_tag_array
from .detector import GateSchedule


class RecoveryError(RuntimeError):
    """Base class for recoverable pipeline failures."""


class NoPeak(RecoveryError):
    pass


class Ambiguous(RecoveryError):
    pass


class EmptyAfterFilter(RecoveryError):
    pass


class DegenerateAbscissa(RecoveryError):
    pass


class NotFound(RecoveryError):
    pass


PEAK_FLOOR_FACTOR = 3.0
FIRST_PEAK_FRACTION = 0.25
SIGN_MARGIN = 2.0
OUTLIER_SIGMAS = 5.0
MAX_HARMONIC = 10


@dataclass(frozen=True)
class CountSeries:
    counts: np.ndarray
    bin_duration: int
    start: int

    @property
    def duration(self) -> int:
        return self.counts.size * self.bin_duration


@dataclass(frozen=True)
class Spectrum:
    amplitudes: np.ndarray
    psd: np.ndarray
    frequency_resolution: float

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.psd.size) * self.frequency_resolution


@dataclass(frozen=True)
class CoarseEstimate:
    k_p: int
    beat_freq: float
    abs_period_delta: float
    snr_observed: float


@dataclass(frozen=True)
class FilteredDataset:
    """Retained ``(k_j, y'_j)`` pairs plus the modulus, threshold and pivot used."""

    k: np.ndarray
    y: np.ndarray
    tau: float
    eps_th: float
    pivot: int
    index: np.ndarray

    def __len__(self) -> int:
        return self.k.size


@dataclass(frozen=True)
class RecoveryEstimate:
    coarse: CoarseEstimate | None
    sign: int
    tau_coa: float
    tau_fin: float
    recovered_period: float
    recovered_frequency: float
    delay_correction: int
    mean_residue: float
    n_retained: int
    d_plus: float = math.nan
    d_minus: float = math.nan
    spread_plus: float = math.nan
    spread_minus: float = math.nan
    residual_std: float = math.nan
    k_mean: float = math.nan
    k_last: int = 0
    n_outliers: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        coarse = d.pop("coarse")
        for key, value in (coarse or {}).items():
            d[f"coarse_{key}"] = value
        return d

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


# -- Fourier stage -------------------------------------------------------------------


def bin_counts(tags, sample: SampleConfig, start: int | None = None) -> CountSeries:
    """Counts per bin over ``[start, start + N_s * bin_duration)``; default start is the first tag."""
    arr = as_tag_array(tags)
    if start is None:
        start = int(arr[0]) if arr.size else 0
    n, width = sample.bin_count, sample.bin_duration
    lo, hi = np.searchsorted(arr, [start, start + n * width], side="left")
    idx = (arr[lo:hi] - start) // width
    return CountSeries(np.bincount(idx, minlength=n).astype(np.int64), width, int(start))


def digital_gate_filter(tags, gates: GateSchedule) -> TimeTagSeries:
    """Keep only tags that fall inside the receiver gates."""
    arr = as_tag_array(tags)
    keep = GateSchedule(gates.f_B, gates.delay, gates.gate_width, "gated").contains(arr)
    return TimeTagSeries(arr[keep], "digital gate")


def fft_spectrum(series: CountSeries) -> Spectrum:
    """Unwindowed DFT of the counts and the periodogram ``|X|^2 / N``."""
    x = np.asarray(series.counts, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two bins")
    amp = np.fft.fft(x)
    psd = (amp.real**2 + amp.imag**2) / x.size
    return Spectrum(amp, psd, FS_PER_S / series.duration)


def _harmonic_hits(k: int, peak: int, n_full: int, max_harmonic: int, folded_only: bool) -> bool:
    """Whether some harmonic ``h * k`` (h <= max_harmonic) lands on ``peak`` in ``[0, N/2]``.

    With ``folded_only`` only harmonics beyond Nyquist count.  The tolerance grows
    with ``h`` because ``k`` is the rounded beat.
    """
    h = np.arange(1, max_harmonic + 1, dtype=np.int64)
    raw = (h * k) % n_full
    folded = np.minimum(raw, n_full - raw)
    hit = np.abs(folded - peak) <= np.maximum(1, (h + 1) // 2)
    if folded_only:
        hit &= h * k > n_full // 2
    return bool(hit.any())


def _first_peak(psd: np.ndarray, n_full: int | None = None, max_harmonic: int = MAX_HARMONIC) -> tuple[int, float]:
    """Fundamental of the beat comb in a one-sided periodogram ``psd[0 .. N/2]``.

    Candidates are non-DC local maxima reaching ``FIRST_PEAK_FRACTION`` of the
    largest line, taken from the lowest index up.  Short-duty beat combs have
    harmonics as strong as the fundamental, so the lowest strong line is normally
    the beat; it is skipped only when it is a harmonic of a higher candidate folded
    back from beyond Nyquist and cannot itself explain that candidate.  Returns the
    index and the peak-to-median ratio.
    """
    n_full = n_full or 2 * (psd.size - 1)
    half = psd[1:]
    top = float(half.max())
    floor = float(np.median(half))
    if floor <= 0:
        floor = float(np.mean(half)) or 0.0
    ratio = math.inf if floor == 0 else top / floor
    # rounding residue of a constant series is not a line
    if top <= 1e-20 * max(float(psd[0]), 1.0) or ratio < PEAK_FLOOR_FACTOR:
        raise NoPeak(f"largest non-DC line is {ratio:.3g}x the median floor")
    strong = np.flatnonzero(half >= FIRST_PEAK_FRACTION * top)
    left = np.where(strong > 0, half[np.maximum(strong - 1, 0)], -np.inf)
    right = np.where(strong < half.size - 1, half[np.minimum(strong + 1, half.size - 1)], -np.inf)
    peaks = (strong[(half[strong] >= left) & (half[strong] >= right)] + 1).tolist()
    chosen = peaks[0]
    for i, k in enumerate(peaks):
        aliased = any(
            _harmonic_hits(other, k, n_full, max_harmonic, folded_only=True)
            and not _harmonic_hits(k, other, n_full, n_full // k + 1, folded_only=False)
            for other in peaks[i + 1 :]
        )
        if not aliased:
            chosen = k
            break
    return chosen, (math.inf if floor == 0 else float(psd[chosen]) / floor)


def find_beat_peak(spectrum: Spectrum, f_B: float | None = None) -> CoarseEstimate:
    """Locate the beat line; ``abs_period_delta`` needs the gate frequency ``f_B``."""
    n = spectrum.psd.size
    k, snr = _first_peak(spectrum.psd[: n // 2 + 1], n)
    beat = k * spectrum.frequency_resolution
    delta = (FS_PER_S / f_B) * beat / f_B if f_B else math.nan
    return CoarseEstimate(k, beat, delta, snr)


# -- residue stage -------------------------------------------------------------------


def _residues(arr: np.ndarray, pivot: int, tau: float):
    shifted = (arr - arr[pivot]).astype(np.longdouble) + np.longdouble(tau) / 2
    q = np.floor(shifted / np.longdouble(tau))
    y = (shifted - q * np.longdouble(tau)).astype(np.float64)
    k = (q - q[0]).astype(np.int64)
    return k, y


def _medoid_pivot(arr: np.ndarray, tau: float, half_width: int = 50) -> int:
    """Middle-ish tag whose residue is the circular medoid of its neighbours.

    A single dark count or afterpulse at the exact middle would otherwise put every
    real arrival near the wrap point.
    """
    mid = arr.size // 2
    lo, hi = max(0, mid - half_width), min(arr.size, mid + half_width + 1)
    rel = (arr[lo:hi] - arr[mid]).astype(np.longdouble)
    phase = (rel - np.floor(rel / np.longdouble(tau)) * np.longdouble(tau)).astype(np.float64)
    d = np.abs(phase[:, None] - phase[None, :])
    d = np.minimum(d, tau - d)
    cost = d.sum(axis=1)
    best = np.flatnonzero(cost == cost.min())
    return lo + int(best[np.argmin(np.abs(best + lo - mid))])


def recentre_and_filter(tags, tau_coa: float, eps_th: float, pivot: int | None = None) -> FilteredDataset:
    """Residues modulo ``tau_coa`` about a pivot placed at ``tau_coa / 2``, edge bands removed.

    ``k_j`` counts whole periods from the first tag in the pivot-centred frame.
    Pairs come back with strictly increasing ``k``; a later tag sharing a ``k`` with
    an earlier one is dropped.
    """
    arr = as_tag_array(tags)
    if arr.size == 0:
        raise EmptyAfterFilter("no tags")
    if not 0 < eps_th < tau_coa / 2:
        raise ValueError("eps_th must lie in (0, tau_coa/2)")
    if pivot is None:
        pivot = _medoid_pivot(arr, tau_coa)
    k, y = _residues(arr, pivot, tau_coa)
    keep = (y > eps_th) & (tau_coa - y > eps_th)
    idx = np.flatnonzero(keep)
    if idx.size:
        first = np.concatenate([[True], np.diff(k[idx]) > 0])
        idx = idx[first]
    if idx.size == 0:
        raise EmptyAfterFilter(f"no residues survive eps_th={eps_th:g} fs")
    return FilteredDataset(k[idx], y[idx], float(tau_coa), float(eps_th), int(pivot), idx)


def _block_size(n: int) -> int:
    return max(1, min(64, n // 50))


def average_derivative(data: FilteredDataset) -> float:
    """Length-weighted mean |dy'/dk| over block medians of the residue sequence.

    Medians over short runs of consecutive points suppress jitter and isolated
    noise clicks, so the statistic measures how far the residues actually wander.
    """
    m = _block_size(len(data))
    nb = len(data) // m
    if nb < 2:
        return math.nan
    y = np.median(data.y[: nb * m].reshape(nb, m), axis=1)
    k = np.median(data.k[: nb * m].reshape(nb, m), axis=1)
    span = k[-1] - k[0]
    if span <= 0:
        return math.nan
    return float(np.abs(np.diff(y)).sum() / span)


class SignDecision(NamedTuple):
    sign: int
    data: FilteredDataset
    d_plus: float
    d_minus: float
    spread_plus: float
    spread_minus: float


def residual_spread(data: FilteredDataset) -> float:
    """Robust scale (1.4826 x MAD) of all residues about the robust regression line."""
    try:
        slope, _, kept = robust_fine_tune(data)
    except DegenerateAbscissa:
        return math.nan
    icept = kept.y.mean() - slope * kept.k.mean()
    resid = data.y - (icept + slope * data.k)
    return float(1.4826 * np.median(np.abs(resid - np.median(resid))))


def identify_sign(
    tags, tau_B: float, abs_delta: float, eps_th: float, minus_delta: float | None = None
) -> SignDecision:
    """Choose between periods ``tau_B + abs_delta`` (+1) and ``tau_B - minus_delta`` (-1).

    ``minus_delta`` defaults to ``abs_delta``.  The decision compares how tightly
    each candidate's residues follow a straight line: the right period leaves only
    timing jitter, while the mirror period ``2 tau_B - tau_A`` that gated data
    cannot otherwise rule out leaves twice the arrival position inside the gate.
    The average derivatives are reported alongside.
    """
    if not abs_delta > 0:
        raise ValueError("abs_delta must be positive")
    minus_delta = abs_delta if minus_delta is None else minus_delta
    plus = recentre_and_filter(tags, tau_B + abs_delta, eps_th)
    minus = recentre_and_filter(tags, tau_B - minus_delta, eps_th)
    s_plus, s_minus = residual_spread(plus), residual_spread(minus)
    d_plus, d_minus = average_derivative(plus), average_derivative(minus)
    if not (math.isfinite(s_plus) and math.isfinite(s_minus)):
        raise Ambiguous("too few retained residues to compare")
    lo, hi = sorted((s_plus, s_minus))
    if hi < SIGN_MARGIN * lo or hi == 0:
        raise Ambiguous(f"residual spreads {s_plus:.4g} and {s_minus:.4g} fs are too close")
    if s_plus < s_minus:
        return SignDecision(1, plus, d_plus, d_minus, s_plus, s_minus)
    return SignDecision(-1, minus, d_plus, d_minus, s_plus, s_minus)


def lsr_fine_tune(data: FilteredDataset) -> tuple[float, float]:
    """OLS slope of ``y'`` on ``k`` and the standard deviation of the residuals."""
    k = data.k.astype(np.float64)
    if k.size < 2 or np.all(k == k[0]):
        raise DegenerateAbscissa("need at least two distinct round indices")
    kc = k - k.mean()
    yc = data.y - data.y.mean()
    slope = float(np.dot(kc, yc) / np.dot(kc, kc))
    resid = yc - slope * kc
    return slope, float(resid.std())


def _subset(data: FilteredDataset, mask: np.ndarray) -> FilteredDataset:
    return FilteredDataset(data.k[mask], data.y[mask], data.tau, data.eps_th, data.pivot, data.index[mask])


def robust_fine_tune(data: FilteredDataset, rounds: int = 3) -> tuple[float, float, FilteredDataset]:
    """OLS after discarding points far from a line fitted to block medians.

    Dark counts and afterpulses land at arbitrary residues; a handful of them
    outweigh thousands of jittered arrivals in a plain least-squares fit.
    """
    m = _block_size(len(data))
    nb = len(data) // m
    if nb >= 2:
        ym = np.median(data.y[: nb * m].reshape(nb, m), axis=1)
        km = np.median(data.k[: nb * m].reshape(nb, m), axis=1)
        if np.ptp(km) > 0:
            slope, icept = np.polyfit(km, ym, 1)
        else:
            slope, icept = 0.0, float(np.median(data.y))
    else:
        slope, icept = 0.0, float(np.median(data.y))
    kept = data
    for _ in range(rounds):
        resid = data.y - (icept + slope * data.k)
        mad = float(np.median(np.abs(resid - np.median(resid))))
        scale = max(1.4826 * mad, 1.0)
        mask = np.abs(resid) <= OUTLIER_SIGMAS * scale
        if mask.sum() < 2:
            break
        kept = _subset(data, mask)
        try:
            slope, _ = lsr_fine_tune(kept)
        except DegenerateAbscissa:
            break
        icept = float(kept.y.mean() - slope * kept.k.mean())
    slope, rstd = lsr_fine_tune(kept)
    return slope, rstd, kept


def default_eps_th(tau: float, jitter_sigma: float) -> float:
    return min(max(4.0 * jitter_sigma, 0.05 * tau), tau / 4 * (1 - 1e-9))


def _estimate(coarse, sign, data, tau_coa, decision: SignDecision | None = None):
    tau_fin, rstd, kept = robust_fine_tune(data)
    period = tau_coa + tau_fin
    ybar = float(kept.y.mean())
    return RecoveryEstimate(
        coarse=coarse,
        sign=sign,
        tau_coa=float(tau_coa),
        tau_fin=float(tau_fin),
        recovered_period=float(period),
        recovered_frequency=FS_PER_S / period,
        delay_correction=int(round(tau_coa / 2 - ybar)),
        mean_residue=ybar,
        n_retained=len(kept),
        d_plus=decision.d_plus if decision else math.nan,
        d_minus=decision.d_minus if decision else math.nan,
        spread_plus=decision.spread_plus if decision else math.nan,
        spread_minus=decision.spread_minus if decision else math.nan,
        residual_std=rstd,
        k_mean=float(kept.k.mean()),
        k_last=int(kept.k[-1]),
        n_outliers=len(data) - len(kept),
    )


def recover_frequency(
    tags,
    tau_B: float,
    sample: SampleConfig,
    eps_th: float | None = None,
    start: int | None = None,
) -> RecoveryEstimate:
    """Full initial recovery of the transmitter period from one sample window.

    The two candidate periods are the exact ones implied by the beat,
    ``1 / (f_B -+ beat)``.
    """
    arr = as_tag_array(tags)
    if arr.size == 0:
        raise NoPeak("no tags")
    series = bin_counts(arr, sample, start)
    window = arr[np.searchsorted(arr, series.start) : np.searchsorted(arr, series.start + series.duration)]
    f_B = FS_PER_S / tau_B
    coarse = find_beat_peak(fft_spectrum(series), f_B)
    beat = coarse.beat_freq
    if beat >= f_B:
        raise NoPeak("beat exceeds the gate frequency")
    tau_plus = FS_PER_S / (f_B - beat)
    tau_minus = FS_PER_S / (f_B + beat)
    if eps_th is None:
        eps_th = default_eps_th(tau_B, 0.0)
    decision = identify_sign(window, tau_B, tau_plus - tau_B, eps_th, tau_B - tau_minus)
    return _estimate(coarse, decision.sign, decision.data, decision.data.tau, decision)


def track(
    tags_window, current_tau_B: float, eps_th: float | None = None, reference: int | None = None
) -> RecoveryEstimate:
    """Fine-tune only, treating the current gate period as the coarse period.

    With ``reference`` (a gate centre in fs) the residues are taken relative to it
    instead of to a pivot tag, so ``delay_correction`` is the shift that moves the
    gate onto the mean arrival.
    """
    arr = as_tag_array(tags_window)
    if arr.size == 0:
        raise EmptyAfterFilter("empty tracking window")
    if eps_th is None:
        eps_th = default_eps_th(current_tau_B, 0.0)
    if reference is None:
        data = recentre_and_filter(arr, current_tau_B, eps_th)
    else:
        data = recentre_and_filter(np.concatenate([[reference], arr]), current_tau_B, eps_th, pivot=0)
        keep = data.index > 0
        data = FilteredDataset(data.k[keep], data.y[keep], data.tau, eps_th, 0, data.index[keep] - 1)
        if len(data) == 0:
            raise EmptyAfterFilter("no residues survive around the reference")
    est = _estimate(None, 0, data, current_tau_B)
    return est


# -- delay search --------------------------------------------------------------------


def delay_scan(
    rate_probe: Callable[[int], float],
    tau_B: float,
    gate_width: int,
    threshold: float | None = None,
    start: int = 0,
    offset_probe: Callable[[int], float] | None = None,
) -> int:
    """Find a gate delay that sees the signal and centre it on the arrivals.

    Delays step by ``gate_width / 2`` over one period from ``start``.  With a
    ``threshold`` the scan stops at the first step whose rate reaches it; without
    one the whole period is scanned and the midpoint of the rate range is used.
    Refinement uses ``offset_probe(delay)`` (mean arrival offset from the gate
    centre, fs) when given, otherwise a rate-weighted centroid over quarter steps.
    """
    step = gate_width / 2
    n_steps = max(1, int(math.ceil(tau_B / step)))
    delays = [int(round(start + i * step)) for i in range(n_steps)]
    hit = None
    if threshold is not None:
        for d in delays:
            rate = rate_probe(d)
            if rate >= threshold and rate > 0:
                hit = d
                break
    else:
        rates = np.array([rate_probe(d) for d in delays], dtype=float)
        top = rates.max()
        if top > 0:
            cut = (top + rates.min()) / 2
            hits = np.flatnonzero(rates >= cut)
            if top > rates.min():
                hits = np.flatnonzero(rates > cut) if np.any(rates > cut) else hits
            hit = delays[int(hits[np.argmax(rates[hits])])]
    if hit is None:
        raise NotFound("no delay step shows the signal")
    if offset_probe is not None:
        return int(round(hit + offset_probe(hit)))
    fine = gate_width / 8
    cand = [int(round(hit + i * fine)) for i in range(-8, 9)]
    w = np.array([rate_probe(d) for d in cand], dtype=float)
    if w.sum() <= 0:
        return hit
    w = np.maximum(w - w.min(), 0)
    if w.sum() == 0:
        return hit
    return int(round(float(np.dot(w, cand) / w.sum())))


# -- high-rate baseline ---------------------------------------------------------------


def _max_pool(psd: np.ndarray, points: int) -> tuple[np.ndarray, np.ndarray]:
    """Plot-sized view: the largest value (and its index) in each of ``points`` blocks."""
    width = max(1, -(-psd.size // points))
    n = psd.size // width
    blocks = psd[: n * width].reshape(n, width)
    arg = blocks.argmax(axis=1)
    k = np.arange(n) * width + arg
    if n * width < psd.size:
        tail = psd[n * width :]
        k = np.append(k, n * width + int(tail.argmax()))
    return k, psd[k].astype(np.float64)


def legacy_recover(
    tags,
    f_s: float,
    T_s: int,
    eps_th: float | None = None,
    start: int | None = None,
    spectrum_points: int | None = None,
):
    """Occupancy FFT at ``f_s`` followed by the same regression stage.

    Returns ``(f_coa, tau_fin, perf)`` where ``perf`` holds ``sample_count``,
    ``fft_seconds``, ``bin_seconds``, ``spectrum_bytes`` and ``snr_observed``.
    With ``spectrum_points`` it also holds ``spectrum_decimated``, a max-pooled
    ``(k, psd)`` pair of the one-sided periodogram.
    """
    arr = as_tag_array(tags)
    if arr.size == 0:
        raise NoPeak("no tags")
    tau_s = FS_PER_S / f_s
    n = int(round(T_s / tau_s))
    if start is None:
        start = int(arr[0])
    t0 = time.perf_counter()
    occ = np.zeros(n, dtype=np.float32)
    idx = np.floor((arr - start) / tau_s).astype(np.int64)
    idx = idx[(idx >= 0) & (idx < n)]
    occ[idx] = 1.0
    t1 = time.perf_counter()
    amp = scipy.fft.rfft(occ)
    t2 = time.perf_counter()
    del occ
    spectrum_bytes = amp.nbytes
    psd = np.abs(amp)
    del amp
    psd **= 2
    psd /= n
    perf = {}
    if spectrum_points:
        perf["spectrum_decimated"] = _max_pool(psd, spectrum_points)
    k, snr = _first_peak(psd, n)
    del psd
    f_coa = k * FS_PER_S / T_s
    tau_coa = FS_PER_S / f_coa
    if eps_th is None:
        eps_th = default_eps_th(tau_coa, 0.0)
    window = arr[(arr >= start) & (arr < start + T_s)]
    tau_fin, _, _ = robust_fine_tune(recentre_and_filter(window, tau_coa, eps_th))
    perf.update(
        sample_count=n,
        fft_seconds=t2 - t1,
        bin_seconds=t1 - t0,
        spectrum_bytes=int(spectrum_bytes),
        snr_observed=snr,
    )
    return f_coa, tau_fin, perf
