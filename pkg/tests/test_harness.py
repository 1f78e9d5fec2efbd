import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from beatsync.cli import main
from beatsync.config import ConfigError, dump
from beatsync.core import ClockState
from beatsync.harness import EXPERIMENTS, ExperimentSpec, default_config, linear_fit, run, tone_amplitude
from beatsync.tagfile import read_tags


def _cli(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = main([*args, "--out", str(out)])
    return code, out


def _summary(out):
    return json.loads((out / "summary.json").read_text())


def _header(path):
    with open(path, encoding="utf-8") as fh:
        return next(csv.reader(fh))


def test_every_experiment_has_a_valid_default():
    for name in EXPERIMENTS:
        assert default_config(name).validate().ok, name


def test_spectrum_fast_finds_200_hz(tmp_path):
    code, out = _cli(tmp_path, "spectrum-fast", "--seed", "7")
    s = _summary(out)
    assert code == 0
    assert s["seed"] == 7
    assert abs(s["peak_freq"] - 200.0) <= 1.0
    assert abs(s["recovery_error_Hz"]) < 1e-2
    assert _header(out / "spectrum.csv") == ["k", "freq_Hz", "psd_counts2"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["experiment"] == "spectrum-fast"
    assert "[clock_a]" in manifest["config"]


def test_reruns_are_byte_identical(tmp_path):
    a = _cli(tmp_path, "spectrum-fast", "--seed", "3", name="a")[1]
    b = _cli(tmp_path, "spectrum-fast", "--seed", "3", name="b")[1]
    assert (a / "spectrum.csv").read_bytes() == (b / "spectrum.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()


def test_manifest_reruns_the_same_experiment(tmp_path):
    a = _cli(tmp_path, "snr-sweep-K", "--set", "experiment.trials=2", "--set", "experiment.durations_s=1,2",
             name="a")[1]
    cfg_path = tmp_path / "resolved.ini"
    cfg_path.write_text(json.loads((a / "manifest.json").read_text())["config"])
    b = _cli(tmp_path, "snr-sweep-K", "--config", str(cfg_path), name="b")[1]
    assert (a / "snr_sweep.csv").read_bytes() == (b / "snr_sweep.csv").read_bytes()


def test_different_seeds_differ(tmp_path):
    a = _cli(tmp_path, "spectrum-fast", "--seed", "1", name="a")[1]
    b = _cli(tmp_path, "spectrum-fast", "--seed", "2", name="b")[1]
    assert (a / "spectrum.csv").read_bytes() != (b / "spectrum.csv").read_bytes()


def test_config_errors_exit_1(tmp_path, capsys):
    assert _cli(tmp_path, "spectrum-fast", "--set", "detector.nope=1")[0] == 1
    assert _cli(tmp_path, "spectrum-fast", "--set", "detector.gate_width=0")[0] == 1
    assert _cli(tmp_path, "spectrum-fast", "--config", str(tmp_path / "missing.ini"))[0] == 1
    assert _cli(tmp_path, "spectrum-fast", "--seed", "-1")[0] == 1
    assert "error" in capsys.readouterr().err


def test_recovery_failure_exits_2_and_is_reported(tmp_path):
    code, out = _cli(tmp_path, "spectrum-fast", "--set", "clock_a.f=2e7")
    assert code == 2
    s = _summary(out)
    assert s["recovery_error"].split(":")[0] in {"NoPeak", "Ambiguous"}


def test_config_file_round_trip_through_cli(tmp_path):
    cfg = default_config("spectrum-fast").with_options(save_tags="true")
    dump(cfg, tmp_path / "c.ini")
    code, out = _cli(tmp_path, "spectrum-fast", "--config", str(tmp_path / "c.ini"))
    assert code == 0
    tags = read_tags(out / "tags.ttag")
    causes = (out / "causes.csv").read_text().splitlines()
    assert causes[0] == "round,cause"
    assert len(causes) - 1 == len(tags) > 0


def test_spectrum_legacy_peak(tmp_path):
    code, out = _cli(tmp_path, "spectrum-legacy", "--set", "experiment.legacy_fs=1e8")
    s = _summary(out)
    assert code == 0
    assert abs(s["peak_freq"] - 20_000_200.0) <= 1.0


def test_low_snr_one_to_one_is_distinguishable(tmp_path):
    code, out = _cli(tmp_path, "low-snr", "--set", "experiment.case=1:1", "--seed", "4")
    s = _summary(out)
    assert code == 0
    assert s["snr_observed"] >= 10
    assert abs(s["peak_freq"] - 200.0) <= 1.0


def test_low_snr_rejects_unknown_case(tmp_path):
    assert _cli(tmp_path, "low-snr", "--set", "experiment.case=9:1")[0] == 1


def test_track_without_drift_keeps_both_arms_aligned(tmp_path):
    cfg = replace(default_config("track"), clock_a=ClockState(20_000_000.0)).with_options(duration_s=10.0)
    res = run(ExperimentSpec("track", cfg, 0, tmp_path))
    free, locked = res.summary["untracked"], res.summary["tracked"]
    assert free["round_misalign_max_abs"] == 0
    assert free["delta_f_max_abs_Hz"] == 0.0
    assert free["arrival_misalign_max_abs_ps"] == 0.0
    # the tracked arm applies estimated corrections, so it only stays near zero
    assert locked["round_misalign_max_abs"] == 0
    assert locked["delta_f_max_abs_Hz"] < 1e-4
    assert locked["arrival_misalign_max_abs_ps"] < 10
    assert _header(tmp_path / "track_tracked.csv") == [
        "t_s", "delta_f_Hz", "arrival_misalign_ps", "round_misalign", "status"]


def test_short_drifting_track_stays_locked(tmp_path):
    cfg = default_config("track").with_options(duration_s=20.0)
    res = run(ExperimentSpec("track", cfg, 1, tmp_path))
    assert res.exit_code == 0
    assert res.summary["tracked"]["round_misalign_max_abs"] == 0
    assert res.summary["tracked"]["arrival_misalign_max_abs_ps"] <= 100


def test_psd_variance_small_run(tmp_path):
    code, out = _cli(tmp_path, "psd-variance", "--set", "experiment.runs=3")
    assert code == 0
    assert _summary(out)["runs"] == 3
    assert len((out / "psd_variance.csv").read_text().splitlines()) == 4


def test_resolution_sweep_small_run(tmp_path):
    code, out = _cli(tmp_path, "resolution-sweep", "--set", "experiment.trials=3",
                     "--set", "experiment.q_levels=0.004,0.016")
    s = _summary(out)
    assert code == 0
    assert s["sign_success_rate"] == 1.0
    assert _header(out / "resolution.csv")[:3] == ["Q", "inv_sqrt_Q", "mean_abs_error_Hz"]


def test_plot_flag_writes_png(tmp_path):
    pytest.importorskip("matplotlib")
    code, out = _cli(tmp_path, "spectrum-fast", "--plot")
    assert code == 0
    assert (out / "spectrum.png").read_bytes()[:4] == b"\x89PNG"


def test_no_png_without_plot_flag(tmp_path):
    out = _cli(tmp_path, "spectrum-fast")[1]
    assert not list(out.glob("*.png"))


def test_unknown_experiment_name():
    with pytest.raises(ConfigError):
        ExperimentSpec("nonsense", default_config("bench"), 0, ".")
    with pytest.raises(SystemExit):
        main(["nonsense", "--out", "x"])


def test_linear_fit_exact_line():
    fit = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert fit["slope"] == pytest.approx(2.0)
    assert fit["intercept"] == pytest.approx(1.0)
    assert fit["r_squared"] == pytest.approx(1.0)


def test_tone_amplitude_of_rigid_train():
    t = np.arange(1000, dtype=np.int64) * 50_000_000
    assert abs(tone_amplitude(t, 2e7)) == pytest.approx(1000.0)
    assert abs(tone_amplitude(t, 2e7 + 2e4)) < 1e-6 * 1000


def test_track_fit_fraction_is_validated(tmp_path):
    assert _cli(tmp_path, "track", "--set", "experiment.fit_fraction=0")[0] == 1
