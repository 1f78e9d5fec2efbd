"""PNG figures rendered from the CSV tables the harness writes."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read(path):
    return np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")


def _save(fig, out) -> Path:
    out = Path(out)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_spectrum(csv_path, out, peak_freq=None) -> Path:
    d = _read(csv_path)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.semilogy(d["freq_Hz"][1:], np.maximum(d["psd_counts2"][1:], 1e-12), lw=0.8)
    if peak_freq:
        ax.axvline(peak_freq, color="C3", ls="--", lw=0.8, label=f"peak {peak_freq:.6g} Hz")
        ax.legend()
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("PSD (counts$^2$)")
    return _save(fig, out)


def plot_track(tracked_csv, untracked_csv, out) -> Path:
    a, b = _read(tracked_csv), _read(untracked_csv)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for d, label in ((b, "untracked"), (a, "tracked")):
        ax1.plot(d["t_s"], d["delta_f_Hz"], label=label)
        ax2.plot(d["t_s"], d["arrival_misalign_ps"], label=label)
    ax1.set_ylabel("$f_A - f_B$ (Hz)")
    ax2.set_ylabel("arrival offset (ps)")
    ax2.set_xlabel("time (s)")
    ax1.legend()
    return _save(fig, out)


def plot_sweep(csv_path, out, fit: dict) -> Path:
    d = _read(csv_path)
    x = d[d.dtype.names[0]]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(x, d["snr_mean"], yerr=d["snr_sem"], fmt="o", label="simulated")
    ax.plot(x, d["snr_predicted"], "--", label="predicted")
    if np.isfinite(fit.get("slope", np.nan)):
        ax.plot(x, fit["slope"] * x + fit["intercept"], "-", lw=0.8, label=f"fit $R^2$={fit['r_squared']:.3f}")
    ax.set_xlabel(d.dtype.names[0])
    ax.set_ylabel("SNR")
    ax.legend()
    return _save(fig, out)


def plot_resolution(csv_path, out, fit: dict) -> Path:
    d = _read(csv_path)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(d["inv_sqrt_Q"], d["mean_abs_error_Hz"], "o", label="simulated")
    if np.isfinite(fit.get("slope", np.nan)):
        x = d["inv_sqrt_Q"]
        ax.plot(x, fit["slope"] * x + fit["intercept"], "-", label=f"fit $R^2$={fit['r_squared']:.3f}")
    ax.set_xlabel("$Q^{-1/2}$")
    ax.set_ylabel("mean |error| (Hz)")
    ax.legend()
    return _save(fig, out)
