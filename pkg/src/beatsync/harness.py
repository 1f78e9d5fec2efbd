"""Deterministic experiment runners behind the ``beatsync`` command.

Each runner takes an :class:`ExperimentSpec`, writes ``manifest.json`` first, then
its CSV tables (header row with units) and ``summary.json`` (which embeds the seed).
Monte Carlo trials draw from ``RngHandle(seed, (experiment, point, trial))`` so a
trial's randomness does not depend on which other trials ran.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.stats import linregress

from . import __version__
from .config import ConfigError, ExperimentConfig, dumps
from .core import FS_PER_S, ClockState, DetectorParams, ProtocolParams, RngHandle, SampleConfig, s_to_fs
from .detector import (
    CAUSE_QUBIT,
    GateSchedule,
    Simulator,
    SimRunResult,
    photon_click_probs,
    simulate,
    yield_per_round,
)
from .recovery import (
    RecoveryError,
    bin_counts,
    default_eps_th,
    digital_gate_filter,
    fft_spectrum,
    find_beat_peak,
    legacy_recover,
    recover_frequency,
    track,
)
from .tagfile import write_cause_sidecar, write_tags
from .theory import PsdPrediction, psd_predict

EXPERIMENTS = (
    "spectrum-legacy",
    "spectrum-fast",
    "low-snr",
    "track",
    "snr-sweep-counts",
    "snr-sweep-K",
    "psd-variance",
    "resolution-sweep",
    "bench",
)

# First element of every trial's RNG key, so experiments never share draws.
_EXPERIMENT_KEYS = {name: 100 + i for i, name in enumerate(EXPERIMENTS)}


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    config: ExperimentConfig
    seed: int
    out: Path
    overrides: tuple[str, ...] = ()
    config_path: str | None = None
    plot: bool = False

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        object.__setattr__(self, "out", Path(self.out))

    def rng(self, *key: int) -> RngHandle:
        return RngHandle(self.seed, (_EXPERIMENT_KEYS[self.name],) + tuple(int(k) for k in key))


@dataclass
class RunResult:
    name: str
    summary: dict
    files: list[Path] = field(default_factory=list)
    exit_code: int = 0


def default_config(name: str) -> ExperimentConfig:
    """Built-in configuration for an experiment; ``--config`` replaces it wholesale."""
    base = ExperimentConfig()
    if name == "spectrum-legacy" or name == "bench":
        return replace(base, gate_mode="free_running").with_options(legacy_fs=2e8)
    if name == "low-snr":
        return base.with_options(case="4:1")
    if name == "track":
        return replace(
            base,
            clock_a=ClockState(20_000_000.0, fast_drift_var=(5e-8) ** 2, slow_drift_var=(5e-9) ** 2),
            clock_b=ClockState(20_000_000.0),
        ).with_options(duration_s=200.0, interval_s=2.0)
    if name == "snr-sweep-counts":
        return base.with_options(trials=10, knq_start=80.0, knq_stop=800.0, step_db=1.0, qubit_fraction=0.8)
    if name == "snr-sweep-K":
        return base.with_options(trials=10, durations_s="1,2,3,4,5,6,7,8,9,10", qubit_rate=80.0, noise_rate=20.0)
    if name == "psd-variance":
        return base.with_options(runs=20, qubit_counts=80.0, noise_counts=20.0)
    if name == "resolution-sweep":
        return replace(
            base, sample=SampleConfig(FS_PER_S, 50_000_000_000, 1.0)
        ).with_options(trials=100, q_levels="0.001,0.002,0.004,0.008,0.016", delta_f_max=1e4)
    return base


# -- output helpers ------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_manifest(spec: ExperimentSpec) -> Path:
    spec.out.mkdir(parents=True, exist_ok=True)
    return write_json(
        spec.out / "manifest.json",
        {
            "experiment": spec.name,
            "seed": spec.seed,
            "code_version": __version__,
            "config_path": spec.config_path,
            "overrides": list(spec.overrides),
            "config": dumps(spec.config),
        },
    )


def linear_fit(x, y) -> dict:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size < 2 or np.ptp(x) == 0:
        return {"slope": math.nan, "intercept": math.nan, "r_squared": math.nan, "n": int(x.size)}
    fit = linregress(x, y)
    return {
        "slope": float(fit.slope),
        "intercept": float(fit.intercept),
        "r_squared": float(fit.rvalue**2),
        "slope_stderr": float(fit.stderr),
        "n": int(x.size),
    }


# -- shared scenarios ----------------------------------------------------------------


def _mean_click(protocol: ProtocolParams, detector: DetectorParams) -> float:
    probs = np.array([p for _, p in protocol.intensities])
    return float(np.sum(probs * photon_click_probs(protocol, detector)))


def solve_transmittance(protocol: ProtocolParams, detector: DetectorParams, target: float) -> float:
    """Channel transmittance giving an average in-gate photon click probability ``target``."""
    full = _mean_click(replace(protocol, channel_transmittance=1.0), detector)
    if not 0 <= target <= full:
        raise ConfigError(f"click probability {target:g} is out of reach (max {full:g})")
    if target == 0:
        return 0.0
    return float(
        brentq(lambda t: _mean_click(replace(protocol, channel_transmittance=t), detector) - target,
               0.0, 1.0, xtol=1e-15, rtol=1e-13)
    )


def aligned_phase(f_A: float, f_B: float, delay: int, at: int) -> tuple[int, float]:
    """Transmitter start phase (int fs, fraction) whose pulse meets a gate centre at time ``at``."""
    tau_a, tau_b = FS_PER_S / f_A, FS_PER_S / f_B
    j = round(at / tau_a)
    phase = (delay + j * (tau_b - tau_a)) % tau_b
    whole = math.floor(phase)
    return int(whole), phase - whole


@dataclass(frozen=True)
class LowRateScenario:
    """Gated beat with a chosen number of qubit and dark counts, bursts centred in bins."""

    protocol: ProtocolParams
    detector: DetectorParams
    gates: GateSchedule
    clock_a: ClockState
    sample: SampleConfig
    n_rounds: int
    prediction: PsdPrediction

    @property
    def K(self) -> int:
        return int(round(self.prediction.K))


def low_rate_scenario(
    cfg: ExperimentConfig, qubit_counts: float, noise_counts: float, duration_s: float
) -> LowRateScenario:
    f_A, f_B = cfg.clock_a.f, cfg.clock_b.f
    det, T_g = cfg.detector, cfg.detector.gate_width
    beat = abs(f_A - f_B)
    if beat == 0:
        raise ConfigError("low-rate scenarios need mismatched clocks")
    sample = replace(cfg.sample, sample_duration=s_to_fs(duration_s))
    n_rounds = int(round(duration_s * f_A))
    tau_a, tau_b = FS_PER_S / f_A, FS_PER_S / f_B
    in_gate = n_rounds * T_g / tau_b
    T = solve_transmittance(cfg.protocol, det, qubit_counts / in_gate)
    protocol = replace(cfg.protocol, channel_transmittance=T)
    det = replace(det, dark_prob=noise_counts / (duration_s * f_B))
    phase, frac = aligned_phase(f_A, f_B, cfg.gate_delay, sample.bin_duration // 2)
    clock_a = replace(cfg.clock_a, phase=phase, phase_frac=frac)

    L = int(round(sample.sampling_rate / beat))
    M = sample.bin_count // 2
    N_q = T_g / abs(tau_a - tau_b)
    N_s = sample.bin_duration / tau_a
    pred = psd_predict(N_q, N_s, yield_per_round(protocol, det), det.dark_prob, L, M)
    gates = GateSchedule(f_B, cfg.gate_delay, T_g, "gated")
    return LowRateScenario(protocol, det, gates, clock_a, sample, n_rounds, pred)


def run_scenario(sc: LowRateScenario, rng: RngHandle) -> SimRunResult:
    return simulate(sc.protocol, sc.detector, sc.gates, sc.clock_a, sc.n_rounds, rng)


def beat_snr(psd: np.ndarray, K: int) -> tuple[float, float, np.ndarray]:
    """Mean PSD on beat harmonics and on the remaining non-DC bins below Nyquist."""
    n = psd.size
    k = np.arange(1, n // 2)
    on = k % K == 0
    return float(psd[k[on]].mean()), float(psd[k[~on]].mean()), psd[k[~on]]


def tone_amplitude(tags, freq: float) -> complex:
    """Single-frequency DFT of a tag train, ``sum exp(-2 pi i f t)``."""
    arr = np.asarray(tags, dtype=np.int64)
    tau = FS_PER_S / freq
    rel = arr.astype(np.longdouble)
    phase = (rel - np.floor(rel / np.longdouble(tau)) * np.longdouble(tau)) / np.longdouble(tau)
    return complex(np.exp(-2j * np.pi * phase.astype(np.float64)).sum())


# -- runners --------------------------------------------------------------------------


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _spectrum_rows(freqs, psd, k=None):
    k = np.arange(psd.size) if k is None else k
    return zip(k.tolist(), freqs.tolist(), psd.tolist())


def _fast_spectrum_job(spec: ExperimentSpec, tags, sample: SampleConfig, f_B: float, start: int, tag: str):
    """Spectrum CSV plus peak summary; recovery errors go into the summary."""
    series = bin_counts(tags, sample, start)
    sp = fft_spectrum(series)
    half = sp.psd[: sp.psd.size // 2 + 1]
    path = write_csv(
        spec.out / f"{tag}.csv", ["k", "freq_Hz", "psd_counts2"], _spectrum_rows(sp.frequencies[: half.size], half)
    )
    summary = {"sample_count": int(series.counts.size), "total_counts": int(series.counts.sum())}
    try:
        coarse = find_beat_peak(sp, f_B)
        summary.update(peak_freq=coarse.beat_freq, snr_observed=coarse.snr_observed, k_p=coarse.k_p)
        ok = True
    except RecoveryError as exc:
        summary.update(peak_freq=None, snr_observed=None, error=f"{type(exc).__name__}: {exc}")
        ok = False
    return path, summary, ok, sp


def run_spectrum(spec: ExperimentSpec) -> RunResult:
    cfg = spec.config
    write_manifest(spec)
    files = [spec.out / "manifest.json"]
    f_A, f_B = cfg.clock_a.f, cfg.clock_b.f
    summary: dict = {"seed": spec.seed, "experiment": spec.name, "f_A_Hz": f_A, "f_B_Hz": f_B}
    ok = True

    if spec.name == "low-snr":
        case = cfg.option("case", "4:1")
        presets = {"4:1": (80.0, 20.0, 1.0), "1:1": (200.0, 200.0, 10.0)}
        if case not in presets:
            raise ConfigError(f"low-snr case must be one of {sorted(presets)}")
        q, n, dur = presets[case]
        q = cfg.option("qubit_counts", q, float)
        n = cfg.option("noise_counts", n, float)
        dur = cfg.option("duration_s", dur, float)
        sc = low_rate_scenario(cfg, q, n, dur)
        res = run_scenario(sc, spec.rng(0))
        path, part, ok, sp = _fast_spectrum_job(spec, res.tags, sc.sample, f_B, 0, "spectrum")
        s_bf, s_noi, _ = beat_snr(sp.psd, sc.K)
        summary.update(part)
        summary.update(
            case=case, qubit_counts=res.count(CAUSE_QUBIT), noise_counts=len(res.tags) - res.count(CAUSE_QUBIT),
            duration_s=dur, snr_beat_lines=s_bf / s_noi if s_noi > 0 else None,
            snr_predicted=sc.prediction.snr, snr_predicted_simplified=sc.prediction.snr_simplified,
        )
        files.append(path)
    elif spec.name == "spectrum-fast":
        gates = GateSchedule(f_B, cfg.gate_delay, cfg.detector.gate_width, cfg.gate_mode)
        n_rounds = int(math.ceil(cfg.sample.duration_s * f_A)) + 1
        res = simulate(cfg.protocol, cfg.detector, gates, cfg.clock_a, n_rounds, spec.rng(0))
        if cfg.option("save_tags", False, _parse_bool):
            write_tags(spec.out / "tags.ttag", res.tags)
            write_cause_sidecar(spec.out / "causes.csv", res.rounds, res.causes)
            files += [spec.out / "tags.ttag", spec.out / "causes.csv"]
        tags = res.tags if cfg.gate_mode == "gated" else digital_gate_filter(res.tags, replace(gates, mode="gated"))
        path, part, ok, _ = _fast_spectrum_job(spec, tags, cfg.sample, f_B, 0, "spectrum")
        summary.update(part)
        files.append(path)
        try:
            est = recover_frequency(tags, FS_PER_S / f_B, cfg.sample, start=0)
            summary.update(recovered_frequency_Hz=est.recovered_frequency,
                           recovery_error_Hz=est.recovered_frequency - f_A, sign=est.sign)
        except RecoveryError as exc:
            summary["recovery_error"] = f"{type(exc).__name__}: {exc}"
            ok = False
    else:
        f_s = cfg.option("legacy_fs", 2e8, float)
        points = cfg.option("spectrum_points", 20000, int)
        gates = GateSchedule(f_B, cfg.gate_delay, cfg.detector.gate_width, "free_running")
        n_rounds = int(math.ceil(cfg.sample.duration_s * f_A)) + 1
        res = simulate(cfg.protocol, cfg.detector, gates, cfg.clock_a, n_rounds, spec.rng(0))
        try:
            f_coa, tau_fin, perf = legacy_recover(res.tags, f_s, cfg.sample.sample_duration, start=0,
                                                  spectrum_points=points)
            k_idx, pooled = perf.pop("spectrum_decimated")
            freqs = k_idx * (FS_PER_S / cfg.sample.sample_duration)
            files.append(write_csv(spec.out / "spectrum.csv", ["k", "freq_Hz", "psd_counts2"],
                                   _spectrum_rows(freqs, pooled, k_idx)))
            period = FS_PER_S / f_coa + tau_fin
            summary.update(peak_freq=f_coa, snr_observed=perf["snr_observed"], sample_count=perf["sample_count"],
                           recovered_frequency_Hz=FS_PER_S / period, recovery_error_Hz=FS_PER_S / period - f_A,
                           spectrum_bytes=perf["spectrum_bytes"], fft_seconds=perf["fft_seconds"])
        except RecoveryError as exc:
            summary.update(peak_freq=None, snr_observed=None, error=f"{type(exc).__name__}: {exc}")
            ok = False
    files.append(write_json(spec.out / "summary.json", summary))
    if spec.plot:
        from .plotting import plot_spectrum
        files.append(plot_spectrum(spec.out / "spectrum.csv", spec.out / "spectrum.png", summary.get("peak_freq")))
    return RunResult(spec.name, summary, files, 0 if ok else 2)


def _trace_row(t_fs: int, f_A: float, seg, round_idx: int, n_offset: int):
    n = int(seg.nearest_index(np.array([t_fs], np.int64))[0])
    misalign = t_fs - seg.centre(n)
    return [t_fs / FS_PER_S, f_A - FS_PER_S / seg.tau, misalign / 1000.0, n - round_idx - n_offset]


def run_track(spec: ExperimentSpec) -> RunResult:
    """Two arms on one drifting transmitter: gates retuned every interval, and gates left alone."""
    cfg = spec.config
    write_manifest(spec)
    duration = cfg.option("duration_s", 200.0, float)
    interval = cfg.option("interval_s", 2.0, float)
    tracking = cfg.option("tracking", "on") != "off"
    # drift is a random walk, so the latest tags predict the next interval best
    fit_fraction = cfg.option("fit_fraction", 0.25, float)
    if not 0 < fit_fraction <= 1:
        raise ConfigError("experiment.fit_fraction must lie in (0, 1]")
    f_B0 = cfg.clock_b.f
    tau0 = FS_PER_S / f_B0
    delay = cfg.gate_delay
    clock_a = cfg.clock_a
    if clock_a.phase == 0 and delay:
        clock_a = replace(clock_a, phase=delay)
    gates = GateSchedule(f_B0, delay, cfg.detector.gate_width, cfg.gate_mode)
    sim = Simulator(cfg.protocol, cfg.detector, gates, clock_a, spec.rng(0))
    static = sim.gate_segment
    n_offset = int(static.nearest_index(np.array([sim.trajectory.now], np.int64))[0])
    eps = default_eps_th(tau0, cfg.detector.jitter_sigma)
    rounds_per_step = int(round(interval * clock_a.f))
    n_steps = int(round(duration / interval))

    tracked_rows, free_rows, events = [], [], []
    lost = 0
    tags_total = 0

    def snapshot():
        traj = sim.trajectory
        return (
            _trace_row(traj.now, traj.f, sim.gate_segment, traj.round, n_offset),
            _trace_row(traj.now, traj.f, static, traj.round, n_offset),
        )

    # Rows are taken before each correction, so they show the error accumulated
    # over the preceding interval.
    row, free = snapshot()
    tracked_rows.append(row + ["start"])
    free_rows.append(free + ["free"])
    for step in range(n_steps):
        res = sim.run(rounds_per_step)
        tags = res.tags.tags
        tags_total += tags.size
        row, free = snapshot()
        status = "hold"
        if tracking:
            seg = sim.gate_segment
            try:
                window = tags[tags >= sim.trajectory.now - fit_fraction * interval * FS_PER_S]
                if window.size == 0:
                    raise RecoveryError("no tags in window")
                n_ref = int(seg.nearest_index(window[:1])[0])
                ref = seg.centre(n_ref)
                est = track(window, seg.tau, eps, reference=ref)
                k_now = (sim.trajectory.now - ref) / seg.tau
                shift = -est.delay_correction + est.tau_fin * (k_now - est.k_mean)
                sim.retune(FS_PER_S / est.recovered_period, int(round(shift)))
                status = "locked"
            except RecoveryError as exc:
                lost += 1
                status = "lost"
                events.append({"t_s": sim.trajectory.now / FS_PER_S, "error": f"{type(exc).__name__}: {exc}"})
        tracked_rows.append(row + [status])
        free_rows.append(free + ["free"])

    header = ["t_s", "delta_f_Hz", "arrival_misalign_ps", "round_misalign", "status"]
    files = [spec.out / "manifest.json"]
    files.append(write_csv(spec.out / "track_tracked.csv", header, tracked_rows))
    files.append(write_csv(spec.out / "track_untracked.csv", header, free_rows))

    def stats(rows, skip_first):
        arr = np.array([r[:4] for r in rows[1 if skip_first else 0 :]], dtype=float)
        return {
            "delta_f_rms_Hz": float(np.sqrt(np.mean(arr[:, 1] ** 2))),
            "delta_f_max_abs_Hz": float(np.max(np.abs(arr[:, 1]))),
            "arrival_misalign_max_abs_ps": float(np.max(np.abs(arr[:, 2]))),
            "round_misalign_max_abs": int(np.max(np.abs(arr[:, 3]))),
            "round_misalign_nonzero": int(np.count_nonzero(arr[:, 3])),
        }

    summary = {
        "seed": spec.seed,
        "experiment": spec.name,
        "duration_s": duration,
        "interval_s": interval,
        "tracking": tracking,
        "tags_total": tags_total,
        "loss_of_lock_events": lost,
        "events": events,
        "tracked": stats(tracked_rows, True),
        "untracked": stats(free_rows, True),
    }
    files.append(write_json(spec.out / "summary.json", summary))
    if spec.plot:
        from .plotting import plot_track
        files.append(plot_track(spec.out / "track_tracked.csv", spec.out / "track_untracked.csv", spec.out / "track.png"))
    code = 2 if tracking and lost > n_steps // 2 else 0
    return RunResult(spec.name, summary, files, code)


def snr_trial(sc: LowRateScenario, rng: RngHandle) -> tuple[float, np.ndarray]:
    """Observed beat-line SNR and the noise-bin PSD values of one simulated run."""
    res = run_scenario(sc, rng)
    sp = fft_spectrum(bin_counts(res.tags, sc.sample, 0))
    s_bf, s_noi, noise = beat_snr(sp.psd, sc.K)
    return (s_bf / s_noi if s_noi > 0 else math.nan), noise


def _sweep_points(spec: ExperimentSpec):
    cfg = spec.config
    if spec.name == "snr-sweep-counts":
        lo = cfg.option("knq_start", 80.0, float)
        hi = cfg.option("knq_stop", 800.0, float)
        step = cfg.option("step_db", 1.0, float)
        frac = cfg.option("qubit_fraction", 0.8, float)
        n = int(math.floor(10 * math.log10(hi / lo) / step + 1e-9)) + 1
        for i in range(n):
            q = lo * 10 ** (i * step / 10)
            yield i, q, q * (1 - frac) / frac, 1.0
    else:
        rate_q = cfg.option("qubit_rate", 80.0, float)
        rate_n = cfg.option("noise_rate", 20.0, float)
        durations = [float(x) for x in cfg.option("durations_s", "1,2,3,4,5,6,7,8,9,10").split(",")]
        for i, d in enumerate(durations):
            yield i, rate_q * d, rate_n * d, d


def run_snr_sweep(spec: ExperimentSpec) -> RunResult:
    cfg = spec.config
    write_manifest(spec)
    trials = cfg.option("trials", 10, int)
    rows, xs, ys = [], [], []
    for i, q, n, dur in _sweep_points(spec):
        sc = low_rate_scenario(cfg, q, n, dur)
        snrs = np.array([snr_trial(sc, spec.rng(i, t))[0] for t in range(trials)])
        x = sc.prediction.K * sc.prediction.n_q_prime if spec.name == "snr-sweep-counts" else sc.prediction.K
        sem = float(snrs.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.nan
        rows.append([x, float(snrs.mean()), sem, sc.prediction.snr, sc.prediction.snr_simplified, sc.prediction.r_q])
        xs.extend([x] * trials)
        ys.extend(snrs.tolist())
    xname = "K_nq_prime_counts" if spec.name == "snr-sweep-counts" else "K_beat_periods"
    header = [xname, "snr_mean", "snr_sem", "snr_predicted", "snr_predicted_simplified", "r_q"]
    files = [spec.out / "manifest.json", write_csv(spec.out / "snr_sweep.csv", header, rows)]
    fit_trials = linear_fit(xs, ys)
    fit_means = linear_fit([r[0] for r in rows], [r[1] for r in rows])
    summary = {
        "seed": spec.seed,
        "experiment": spec.name,
        "trials_per_point": trials,
        "x_column": xname,
        "fit": fit_means,
        "fit_all_trials": fit_trials,
        "r_q_mean": float(np.mean([r[5] for r in rows])),
    }
    files.append(write_json(spec.out / "summary.json", summary))
    if spec.plot:
        from .plotting import plot_sweep
        files.append(plot_sweep(spec.out / "snr_sweep.csv", spec.out / "snr_sweep.png", fit_means))
    return RunResult(spec.name, summary, files, 0)


def run_psd_variance(spec: ExperimentSpec) -> RunResult:
    """Spread of noise-bin PSD values relative to their mean, one ratio per run."""
    cfg = spec.config
    write_manifest(spec)
    runs = cfg.option("runs", 20, int)
    sc = low_rate_scenario(cfg, cfg.option("qubit_counts", 80.0, float), cfg.option("noise_counts", 20.0, float),
                           cfg.sample.duration_s)
    rows = []
    for r in range(runs):
        snr, noise = snr_trial(sc, spec.rng(0, r))
        rows.append([r, float(noise.mean()), float(noise.var() / noise.mean() ** 2), snr])
    ratios = np.array([row[2] for row in rows])
    header = ["run", "s_noi_mean_counts2", "var_over_mean_sq", "snr"]
    files = [spec.out / "manifest.json", write_csv(spec.out / "psd_variance.csv", header, rows)]
    summary = {
        "seed": spec.seed,
        "experiment": spec.name,
        "runs": runs,
        "var_over_mean_sq": float(ratios.mean()),
        "var_over_mean_sq_sem": float(ratios.std(ddof=1) / math.sqrt(runs)) if runs > 1 else None,
        "s_noi_predicted": sc.prediction.S_noi,
    }
    files.append(write_json(spec.out / "summary.json", summary))
    return RunResult(spec.name, summary, files, 0)


def resolution_trial(cfg: ExperimentConfig, protocol: ProtocolParams, delta_f: float, rng: RngHandle) -> dict:
    """One initial recovery at mismatch ``delta_f`` from a random start phase."""
    f_B = cfg.clock_b.f
    f_A = f_B + delta_f
    phase = int(rng.fork(99).gen.integers(0, int(FS_PER_S / f_B)))
    clock_a = replace(cfg.clock_a, f=f_A, phase=phase, phase_frac=0.0)
    gates = GateSchedule(f_B, cfg.gate_delay, cfg.detector.gate_width, "gated")
    n_rounds = int(math.ceil((cfg.sample.sample_duration - phase) / (FS_PER_S / f_A))) + 1
    res = simulate(protocol, cfg.detector, gates, clock_a, n_rounds, rng)
    truth = -1 if delta_f > 0 else 1
    out = {"delta_f_Hz": delta_f, "sign_true": truth, "tags": len(res.tags)}
    try:
        est = recover_frequency(res.tags, FS_PER_S / f_B, cfg.sample, start=0)
        out.update(status="ok", sign=est.sign, error_Hz=est.recovered_frequency - f_A)
    except RecoveryError as exc:
        out.update(status=type(exc).__name__, sign=0, error_Hz=math.nan)
    return out


def run_resolution_sweep(spec: ExperimentSpec) -> RunResult:
    cfg = spec.config
    write_manifest(spec)
    trials = cfg.option("trials", 100, int)
    levels = [float(x) for x in cfg.option("q_levels", "0.001,0.002,0.004,0.008,0.016").split(",")]
    span = cfg.option("delta_f_max", 1e4, float)
    rows, trial_rows = [], []
    signs_ok = signs_total = failures = 0
    for i, q in enumerate(levels):
        T = solve_transmittance(cfg.protocol, replace(cfg.detector, dark_prob=0.0), q)
        protocol = replace(cfg.protocol, channel_transmittance=T)
        errs = []
        for t in range(trials):
            rng = spec.rng(i, t)
            df = float(rng.fork(98).gen.uniform(-span, span))
            r = resolution_trial(cfg, protocol, df, rng)
            trial_rows.append([q, t, r["delta_f_Hz"], r["sign_true"], r["sign"], r["error_Hz"], r["status"], r["tags"]])
            signs_total += 1
            if r["status"] == "ok":
                errs.append(abs(r["error_Hz"]))
                signs_ok += r["sign"] == r["sign_true"]
            else:
                failures += 1
        mean_err = float(np.mean(errs)) if errs else math.nan
        rows.append([q, q**-0.5, mean_err, len(errs), trials - len(errs)])
    files = [spec.out / "manifest.json"]
    files.append(write_csv(spec.out / "resolution.csv",
                           ["Q", "inv_sqrt_Q", "mean_abs_error_Hz", "n_ok", "n_failed"], rows))
    files.append(write_csv(spec.out / "resolution_trials.csv",
                           ["Q", "trial", "delta_f_Hz", "sign_true", "sign", "error_Hz", "status", "tags"], trial_rows))
    good = [r for r in rows if math.isfinite(r[2])]
    fit = linear_fit([r[1] for r in good], [r[2] for r in good])
    ratios = [good[j][2] / good[j + 1][2] for j in range(len(good) - 1)]
    summary = {
        "seed": spec.seed,
        "experiment": spec.name,
        "trials_per_level": trials,
        "fit": fit,
        "sign_success_rate": signs_ok / signs_total if signs_total else None,
        "failures": failures,
        "error_ratio_per_yield_doubling": ratios,
    }
    files.append(write_json(spec.out / "summary.json", summary))
    if spec.plot:
        from .plotting import plot_resolution
        files.append(plot_resolution(spec.out / "resolution.csv", spec.out / "resolution.png", fit))
    code = 2 if failures > signs_total // 2 else 0
    return RunResult(spec.name, summary, files, code)


def _time_fast(tags, sample: SampleConfig, repeats: int = 50):
    bin_t, fft_t = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        series = bin_counts(tags, sample, 0)
        t1 = time.perf_counter()
        sp = fft_spectrum(series)
        t2 = time.perf_counter()
        bin_t.append(t1 - t0)
        fft_t.append(t2 - t1)
    return series, sp, float(np.median(bin_t)), float(np.median(fft_t))


def run_bench(spec: ExperimentSpec) -> RunResult:
    """Legacy high-rate FFT against the low-rate fast path on the same free-running record."""
    cfg = spec.config
    write_manifest(spec)
    f_A, f_B = cfg.clock_a.f, cfg.clock_b.f
    f_s = cfg.option("legacy_fs", 2e8, float)
    gates = GateSchedule(f_B, cfg.gate_delay, cfg.detector.gate_width, "free_running")
    n_rounds = int(math.ceil(cfg.sample.duration_s * f_A)) + 1
    res = simulate(cfg.protocol, cfg.detector, gates, cfg.clock_a, n_rounds, spec.rng(0))
    gated = digital_gate_filter(res.tags, replace(gates, mode="gated"))
    series, sp, fast_bin, fast_fft = _time_fast(gated, cfg.sample)
    summary = {"seed": spec.seed, "experiment": spec.name, "tags": len(res.tags), "gated_tags": len(gated)}
    code = 0
    try:
        fast_peak = find_beat_peak(sp, f_B).beat_freq
    except RecoveryError:
        fast_peak, code = None, 2
    try:
        f_coa, _, perf = legacy_recover(res.tags, f_s, cfg.sample.sample_duration, start=0)
    except RecoveryError as exc:
        perf, f_coa, code = None, None, 2
        summary["legacy_error"] = f"{type(exc).__name__}: {exc}"
    fast = {
        "samples": int(series.counts.size),
        "fft_s": fast_fft,
        "bin_s": fast_bin,
        "spectrum_bytes": int(sp.amplitudes.nbytes),
        "peak_freq": fast_peak,
    }
    summary["fast"] = fast
    if perf is not None:
        summary["legacy"] = {
            "samples": perf["sample_count"],
            "fft_s": perf["fft_seconds"],
            "bin_s": perf["bin_seconds"],
            "spectrum_bytes": perf["spectrum_bytes"],
            "peak_freq": f_coa,
        }
        summary["speedup"] = perf["fft_seconds"] / fast_fft
        summary["speedup_with_binning"] = (perf["fft_seconds"] + perf["bin_seconds"]) / (fast_fft + fast_bin)
        summary["memory_ratio"] = perf["spectrum_bytes"] / fast["spectrum_bytes"]
    files = [spec.out / "manifest.json", write_json(spec.out / "summary.json", summary)]
    return RunResult(spec.name, summary, files, code)


RUNNERS = {
    "spectrum-legacy": run_spectrum,
    "spectrum-fast": run_spectrum,
    "low-snr": run_spectrum,
    "track": run_track,
    "snr-sweep-counts": run_snr_sweep,
    "snr-sweep-K": run_snr_sweep,
    "psd-variance": run_psd_variance,
    "resolution-sweep": run_resolution_sweep,
    "bench": run_bench,
}


def run(spec: ExperimentSpec) -> RunResult:
    report = spec.config.validate()
    if not report.ok:
        raise ConfigError("; ".join(report.messages()))
    return RUNNERS[spec.name](spec)
