"""Closed-form expectations for count spectra, beat-line SNR and regression resolution.

Times here are seconds and rates are Hz, unlike the femtosecond tag arithmetic
elsewhere, because these formulas are compared against plotted physical values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


def deadtime_rate(Q: float, dead_rounds: float, afterpulse_prob: float = 0.0) -> float:
    """Recorded clicks per round for yield ``Q`` behind a dead time of ``dead_rounds`` rounds."""
    return Q / (1.0 + dead_rounds * Q * (1.0 + afterpulse_prob))


def jitter_attenuation(f, sigma: float):
    """Gaussian timing jitter as a low-pass factor on spectral lines."""
    return np.exp(-2.0 * (np.pi * np.asarray(f, dtype=float) * sigma) ** 2)


def transfer_H(f, Q_eff: float, Q_ap: float, lam: float, dead_time: float, sigma: float):
    """Detector transfer function: prompt yield plus delayed afterpulse response, jitter-filtered.

    ``lam`` is the afterpulse decay rate (1/s) and ``dead_time`` is in seconds.
    """
    f = np.asarray(f, dtype=float)
    w = 2j * np.pi * f
    ap = Q_ap * lam / (w + lam) * np.exp(-w * dead_time)
    return (Q_eff + ap) * jitter_attenuation(f, sigma)


def sinc(x):
    """Unnormalised sinc, ``sin(x)/x`` with the removable singularity filled in."""
    return np.sinc(np.asarray(x, dtype=float) / np.pi)


@dataclass(frozen=True)
class TransferParams:
    Q_eff: float
    Q_ap: float = 0.0
    lam: float = 1e7
    dead_time: float = 0.0
    sigma: float = 0.0

    def __call__(self, f):
        return transfer_H(f, self.Q_eff, self.Q_ap, self.lam, self.dead_time, self.sigma)


@dataclass(frozen=True)
class SpectralLine:
    frequency: float
    complex_amplitude: complex
    group_index: int
    l_index: int


def gated_line_table(
    f_A: float, f_B: float, gate_width: float, H: TransferParams, l_max: int, m_max: int
) -> list[SpectralLine]:
    """Lines of the gated count process: group ``l+m`` at ``(l+m) f_A - l (f_A - f_B)``.

    Lines with exactly equal frequency are merged by summing their amplitudes;
    the merged line keeps the smallest ``|l|`` contributor's indices.
    """
    if not (f_A > 0 and f_B > 0):
        raise ValueError("frequencies must be positive")
    delta = f_A - f_B
    merged: dict[float, list] = {}
    for l in range(-l_max, l_max + 1):
        weight = gate_width * f_A * f_B * float(sinc(l * math.pi * f_B * gate_width))
        for m in range(-m_max, m_max + 1):
            freq = (l + m) * f_A - l * delta
            amp = complex(weight * H(freq - l * f_A))
            if freq in merged:
                entry = merged[freq]
                entry[0] += amp
                if abs(l) < abs(entry[2]):
                    entry[1], entry[2] = l + m, l
            else:
                merged[freq] = [amp, l + m, l]
    return [SpectralLine(f, a, g, l) for f, (a, g, l) in sorted(merged.items())]


def write_line_table(path, lines: list[SpectralLine]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_Hz", "re", "im", "group", "l"])
        for ln in lines:
            w.writerow([repr(ln.frequency), repr(ln.complex_amplitude.real),
                        repr(ln.complex_amplitude.imag), ln.group_index, ln.l_index])


@dataclass(frozen=True)
class PsdPrediction:
    S_DC: float
    S_bf: float
    S_noi: float
    gamma1: float
    gamma2: float
    n_q: float
    n_v: float
    var_q: float
    var_v: float
    L: int
    M: int
    K: float
    r_q: float
    n_q_prime: float
    n_bt: float

    @property
    def snr(self) -> float:
        return self.S_bf / self.S_noi if self.S_noi > 0 else math.inf

    @property
    def snr_simplified(self) -> float:
        return self.K * self.r_q * self.n_q_prime + 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr"] = self.snr
        d["snr_simplified"] = self.snr_simplified
        return d


def psd_predict(
    N_q: float, N_s_rounds: float, Q_q: float, Q_v: float, L: int, M: int
) -> PsdPrediction:
    """Expected periodogram levels for a beat comb of ``L`` bins per beat period.

    ``N_q`` rounds per beat period fall inside gates (the bright bin),
    ``N_s_rounds`` is the number of rounds per bin, ``Q_q``/``Q_v`` the in-gate
    and noise yields, and the series has ``2M`` bins.
    """
    if L < 2 or M < L:
        raise ValueError("need L >= 2 and M >= L")
    N_v = N_s_rounds - N_q
    n_q = N_q * Q_q + N_v * Q_v
    n_v = N_s_rounds * Q_v
    var_q = N_q * Q_q * (1 - Q_q) + N_v * Q_v * (1 - Q_v)
    var_v = N_s_rounds * Q_v * (1 - Q_v)
    g1 = 2.0 / L * n_q * n_v + (L - 2) / L * n_v**2
    g2 = n_q**2 / L + (L - 1) / L * n_v**2
    s_noi = var_q / L + (L - 1) * var_v / L
    s_bf = 2.0 * M / L * (g2 - g1) + s_noi
    s_dc = s_bf + 2.0 * M * g1
    K = 2.0 * M / L
    n_qp = N_q * (Q_q - Q_v)
    n_bt = N_q * Q_q + (L * N_s_rounds - N_q) * Q_v
    r_q = n_qp / n_bt if n_bt > 0 else 0.0
    return PsdPrediction(s_dc, s_bf, s_noi, g1, g2, n_q, n_v, var_q, var_v, L, M, K, r_q, n_qp, n_bt)


def snr_exact(n_q: float, n_v: float, var_q: float, var_v: float, L: int, M: int) -> float:
    """Beat-line over noise-floor ratio without the low-yield simplification."""
    return 2.0 * M / L * (n_q - n_v) ** 2 / (var_q + (L - 1) * var_v) + 1.0


def fine_tune_std(sigma: float, Q: float, n_rounds: int) -> float:
    """Standard deviation of the regressed period offset (same unit as ``sigma``).

    Assumes residues scatter with variance ``2 sigma^2``, as when each arrival
    carries the jitter of two consecutive emissions.  With independent per-arrival
    jitter the residual variance is ``sigma^2``; divide ``sigma`` by ``sqrt(2)``.
    """
    return math.sqrt(24.0) * sigma / (math.sqrt(Q) * n_rounds**1.5)


def expected_dft_line(n_q: float, n_v: float, L: int, M: int, k: int) -> float:
    """DFT of the comb ``n_v + (n_q - n_v) [l mod L == 0]`` over ``2M`` bins, at index ``k``."""
    if (2 * M) % L:
        raise ValueError("2M must be a multiple of L")
    period = 2 * M // L
    if k % (2 * M) == 0:
        return 2.0 * M * (n_q / L + n_v * (L - 1) / L)
    if k % period == 0:
        return 2.0 * M * (n_q - n_v) / L
    return 0.0


def write_psd_prediction(path, pred: PsdPrediction) -> None:
    d = pred.to_dict()
    Path(path).write_text(
        "quantity,value\n" + "".join(f"{k},{v!r}\n" for k, v in d.items()), encoding="utf-8"
    )
