import numpy as np
import pytest

from beatsync.config import ConfigError, ExperimentConfig, apply_overrides, dump, dumps, load, loads
from beatsync.core import TimeTagSeries
from beatsync.tagfile import read_tags, write_cause_sidecar, write_tags


def test_dump_load_round_trip(tmp_path):
    cfg = ExperimentConfig().with_options(trials=5, note="x")
    path = tmp_path / "c.ini"
    dump(cfg, path)
    assert load(path) == cfg


def test_loads_partial_keeps_defaults():
    cfg = loads("[detector]\nefficiency = 0.5\n")
    assert cfg.detector.efficiency == 0.5
    assert cfg.detector.gate_width == ExperimentConfig().detector.gate_width


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        loads("[detector]\nbogus = 1\n")


def test_unknown_section_is_rejected():
    with pytest.raises(ConfigError, match="unknown sections"):
        loads("[nonsense]\na = 1\n")


def test_clock_frequency_is_required():
    with pytest.raises(ConfigError):
        loads("[clock_a]\nphase = 0\n")


def test_bad_gate_mode_is_rejected():
    with pytest.raises(ConfigError):
        loads("[gates]\nmode = sometimes\n")


def test_integer_field_accepts_exponent_notation():
    assert loads("[detector]\ngate_width = 1e6\n").detector.gate_width == 1_000_000
    with pytest.raises(ConfigError):
        loads("[detector]\ngate_width = 1.5\n")


def test_overrides():
    cfg = apply_overrides(
        ExperimentConfig(),
        ["detector.jitter_sigma=1000", "gates.mode=free_running", "experiment.trials=3", "clock_a.f=2e7"],
    )
    assert cfg.detector.jitter_sigma == 1000.0
    assert cfg.gate_mode == "free_running"
    assert cfg.option("trials", cast=int) == 3
    assert cfg.clock_a.f == 2e7


@pytest.mark.parametrize("bad", ["detector.nope=1", "noequals", "gates.width=3", "detector.efficiency=abc"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), [bad])


def test_intensities_parse():
    cfg = loads("[protocol]\nintensities = 0.5:0.25, 0.1:0.75\n")
    assert cfg.protocol.intensities == ((0.5, 0.25), (0.1, 0.75))
    assert loads(dumps(cfg)) == cfg


@pytest.mark.parametrize("header", [True, False])
def test_binary_tag_round_trip(tmp_path, header):
    tags = np.array([-5, 0, 7, 2**62], np.int64)
    write_tags(tmp_path / "t.ttag", tags, header=header)
    assert read_tags(tmp_path / "t.ttag") == TimeTagSeries(tags)


def test_binary_layout_is_little_endian_with_header(tmp_path):
    write_tags(tmp_path / "t.ttag", [1, 2])
    raw = (tmp_path / "t.ttag").read_bytes()
    assert raw[:4] == b"TTAG"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:16], "little") == 2
    assert int.from_bytes(raw[16:24], "little", signed=True) == 1


def test_csv_tag_round_trip(tmp_path):
    tags = [3, 9, 27]
    write_tags(tmp_path / "t.csv", tags, fmt="csv")
    assert (tmp_path / "t.csv").read_text().split() == ["3", "9", "27"]
    assert list(read_tags(tmp_path / "t.csv")) == tags


def test_truncated_tag_file_is_rejected(tmp_path):
    write_tags(tmp_path / "t.ttag", [1, 2, 3])
    p = tmp_path / "t.ttag"
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="header announces"):
        read_tags(p)


def test_cause_sidecar(tmp_path):
    write_cause_sidecar(tmp_path / "c.csv", [4, 9], np.array([0, 2], np.uint8))
    assert (tmp_path / "c.csv").read_text() == "round,cause\n4,qubit\n9,afterpulse\n"
    with pytest.raises(ValueError):
        write_cause_sidecar(tmp_path / "c.csv", [1], [0, 1])
