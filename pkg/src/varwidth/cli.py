"""Command-line entry point.

Exit codes: 0 success, 2 configuration rejected, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigurationError, TrainingDivergenceError
from .experiments import EXPERIMENT_NAMES, EXPERIMENTS, resolve_config

_EPILOG = """\
output files (stable schemas):
  scan.csv         width,point_id,split,variance       per-point MC variance
  summary.csv      width,split,mean_variance           point-averaged variance
  fit.json         exponent/intercept/r_squared/window tail power-law fit
  trace_w*.csv     step,loss,lr                        per-width loss trace
  illustrate_w*.csv x,sample,prediction                sampled prediction curves
  spread.csv       width,x,iqr                         interquartile spread per grid point
  certificate_*.json k/mode/loss/prior_term/per_point_variance/predicted_bound/slope_fit
  lift_series.json per-mode variance sweeps and slope fits
  gradcheck.json   per-architecture relative-error percentiles
  manifest.json    config echo, wall times, sha256 of every output (written last)
  *.png            rendered figures next to the delimited data

config files are TOML key = value documents mirroring the flags; passing a
previous run's manifest.json as --config reruns it bit-identically.
"""


def _parse_widths(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.replace(" ", "").split(",") if tok]
    except ValueError as err:
        raise ConfigurationError(f"cannot parse widths list {text!r}") from err


def load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {path}")
    raw = p.read_bytes()
    if p.suffix == ".json" or raw.lstrip()[:1] == b"{":
        doc = json.loads(raw.decode())
        if isinstance(doc, dict) and "config" in doc and isinstance(doc["config"], dict):
            doc = doc["config"]  # a manifest: rerun from its embedded config
        if not isinstance(doc, dict):
            raise ConfigurationError(f"config file {path} must hold an object")
        return doc
    try:
        return tomllib.loads(raw.decode())
    except tomllib.TOMLDecodeError as err:
        raise ConfigurationError(f"cannot parse {path}: {err}") from err


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varwidth",
        description="Width-scan experiments for stochastic networks: train, sample, certify.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("experiment", choices=EXPERIMENT_NAMES)
    parser.add_argument("--config", help="TOML config file or a previous manifest.json")
    parser.add_argument("--widths", help="comma-separated stochastic-layer widths")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--weight-decay", type=float, dest="weight_decay")
    parser.add_argument("--optimizer", choices=("adam", "sgd"))
    parser.add_argument("--tail-fraction", type=float, dest="tail_fraction")
    parser.add_argument("--steps", type=int, help="training steps per width")
    parser.add_argument("--samples", type=int, dest="variance_samples",
                        help="Monte-Carlo samples per variance estimate")
    parser.add_argument("--dropout-p", type=float, dest="dropout_p",
                        help="dropout keep-probability (mask is 1/p with probability p)")
    parser.add_argument("--input", help="summary CSV to fit (fit-slope)")
    parser.add_argument("--split", choices=("train", "test"), help="split to fit (fit-slope)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = dict(load_config_file(args.config)) if args.config else {}
        for key in ("seed", "out", "weight_decay", "optimizer", "tail_fraction",
                    "steps", "variance_samples", "dropout_p", "input", "split"):
            value = getattr(args, key)
            if value is not None:
                overrides[key] = value
        if args.widths is not None:
            overrides["widths"] = _parse_widths(args.widths)
        cfg = resolve_config(args.experiment, overrides)
        diverged = EXPERIMENTS[cfg.experiment](cfg)
    except ConfigurationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingDivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    if diverged:
        print(f"warning: training diverged at widths {diverged}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
