"""``beatsync <experiment> --config PATH --seed N --out DIR [--set section.key=value ...]``.

Exit status: 0 on success, 2 when recovery errors dominate the run, 1 on
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, apply_overrides, load
from .harness import EXPERIMENTS, ExperimentSpec, default_config, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beatsync", description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", type=Path, help="INI config; built-in experiment defaults when omitted")
    p.add_argument("--seed", type=int, default=0, help="unsigned 64-bit seed (default 0)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. detector.jitter_sigma=1e5 or experiment.trials=50")
    p.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSVs")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config) if args.config else default_config(args.experiment)
        cfg = apply_overrides(cfg, args.overrides)
        if not 0 <= args.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        spec = ExperimentSpec(
            args.experiment, cfg, args.seed, args.out, tuple(args.overrides),
            str(args.config) if args.config else None, args.plot,
        )
        result = run(spec)
    except (ConfigError, OSError) as exc:
        print(f"beatsync: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"experiment": result.name, "exit_code": result.exit_code,
                      "files": [str(f) for f in result.files]}, indent=2))
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
