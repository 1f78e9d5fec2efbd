"""Flat ``key = value`` configuration files, one section per domain type.

Units follow the type definitions: femtoseconds for times, Hz for frequencies,
plain probabilities otherwise.  Floats are written with ``repr`` so a dump/load
round trip is exact.

Example::

    [detector]
    efficiency = 0.2
    gate_width = 1000000
    ...
    [protocol]
    intensities = 0.15:0.6, 0.05:0.2, 0.0:0.2
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .core import ClockState, DetectorParams, ProtocolParams, SampleConfig, validate_config

SECTIONS = {
    "detector": DetectorParams,
    "protocol": ProtocolParams,
    "sample": SampleConfig,
    "clock_a": ClockState,
    "clock_b": ClockState,
}


class ConfigError(ValueError):
    pass


def _default_clock_a() -> ClockState:
    return ClockState(f=20_000_200.0)


def _default_clock_b() -> ClockState:
    return ClockState(f=20_000_000.0)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an experiment needs besides the seed.

    ``gate_delay`` is the centre of Bob's gate 0 in fs; ``gate_mode`` is
    ``gated`` or ``free_running``.  ``options`` carries experiment-specific knobs.
    """

    detector: DetectorParams = field(default_factory=DetectorParams)
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    sample: SampleConfig = field(default_factory=SampleConfig)
    clock_a: ClockState = field(default_factory=_default_clock_a)
    clock_b: ClockState = field(default_factory=_default_clock_b)
    gate_delay: int = 0
    gate_mode: str = "gated"
    options: tuple[tuple[str, str], ...] = ()

    def option(self, key: str, default=None, cast=str):
        for k, v in self.options:
            if k == key:
                return cast(v)
        return default

    def with_options(self, **kw) -> "ExperimentConfig":
        opts = dict(self.options)
        opts.update({k: str(v) for k, v in kw.items()})
        return replace(self, options=tuple(sorted(opts.items())))

    def validate(self):
        return validate_config(self.detector, self.protocol, self.sample, self.clock_a, self.clock_b)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(f"{m!r}:{p!r}" for m, p in value)
    return str(value)


def _parse(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        try:
            return int(text)
        except ValueError:
            val = float(text)
            if not val.is_integer():
                raise ConfigError(f"expected an integer, got {text!r}") from None
            return int(val)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        pairs = []
        for item in text.split(","):
            if not item.strip():
                continue
            mu, _, p = item.partition(":")
            if not p:
                raise ConfigError(f"intensity entries look like mu:prob, got {item!r}")
            pairs.append((float(mu), float(p)))
        return tuple(pairs)
    return text


def _build(cls, items: dict[str, str], where: str):
    proto = cls() if cls is not ClockState else ClockState(f=1.0)
    known = {f.name for f in fields(cls)}
    kw = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {where}.{key}")
        try:
            kw[key] = _parse(raw, getattr(proto, key))
        except ValueError as exc:
            raise ConfigError(f"{where}.{key}: {exc}") from None
    if cls is ClockState and "f" not in kw:
        raise ConfigError(f"{where}.f is required")
    return cls(**kw)


def dumps(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name in SECTIONS:
        obj = getattr(cfg, name)
        cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
    cp["gates"] = {"delay": str(cfg.gate_delay), "mode": cfg.gate_mode}
    if cfg.options:
        cp["experiment"] = dict(cfg.options)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    kw = {}
    for name, cls in SECTIONS.items():
        if cp.has_section(name):
            kw[name] = _build(cls, dict(cp[name]), name)
    if cp.has_section("gates"):
        g = cp["gates"]
        kw["gate_delay"] = _parse(g.get("delay", "0"), 0)
        kw["gate_mode"] = g.get("mode", "gated").strip()
        if kw["gate_mode"] not in ("gated", "free_running"):
            raise ConfigError(f"gates.mode must be gated or free_running, got {kw['gate_mode']!r}")
    if cp.has_section("experiment"):
        kw["options"] = tuple(sorted((k, v.strip()) for k, v in cp["experiment"].items()))
    extra = set(cp.sections()) - set(SECTIONS) - {"gates", "experiment"}
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    return ExperimentConfig(**kw)


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def dump(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` strings (``experiment.key`` sets an option)."""
    for item in overrides:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if section == "experiment":
            cfg = cfg.with_options(**{key: value.strip()})
        elif section == "gates":
            if key == "delay":
                cfg = replace(cfg, gate_delay=_parse(value, 0))
            elif key == "mode":
                cfg = replace(cfg, gate_mode=value.strip())
            else:
                raise ConfigError(f"unknown key gates.{key}")
        elif section in SECTIONS:
            obj = getattr(cfg, section)
            if key not in {f.name for f in fields(obj)}:
                raise ConfigError(f"unknown key {section}.{key}")
            try:
                new = replace(obj, **{key: _parse(value, getattr(obj, key))})
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from None
            cfg = replace(cfg, **{section: new})
        else:
            raise ConfigError(f"unknown section {section!r}")
    return cfg
