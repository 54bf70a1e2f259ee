"""Command line runner: ``rwrelab run|validate|summary``.

Exit codes: 0 success, 1 error (bad config, runtime failure), 2 an
acceptance threshold was missed.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .errors import ConfigError, RwreLabError
from .experiments import DEFAULTS, RUNNERS

log = logging.getLogger("rwrelab")

TOP_KEYS = {"experiment", "params", "seed", "workers", "output_dir", "record_timing"}
ENV_OUTPUT = "RWRELAB_OUTPUT_DIR"
ENV_WORKERS = "RWRELAB_WORKERS"


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict
    seed: int = 0
    workers: int = 1
    output_dir: str = "results"
    record_timing: bool = False
    source: Optional[str] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        """The resolved config as echoed in the manifest (the output location is implied by it)."""
        return {"experiment": self.experiment, "params": self.params, "seed": self.seed,
                "workers": self.workers, "record_timing": self.record_timing}


VALUE_KEYS = {"u", "dist"}      # object-valued parameters that are replaced whole, not merged


def _merge(defaults, given, path: str):
    """Recursively overlay ``given`` on ``defaults``; unknown keys and type clashes raise ConfigError."""
    if not isinstance(given, dict):
        raise ConfigError(f"{path}: expected an object, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        kp = f"{path}.{k}"
        if k not in defaults:
            raise ConfigError(f"{kp}: unknown key (allowed: {', '.join(sorted(defaults))})")
        d = defaults[k]
        if isinstance(d, dict) and k not in VALUE_KEYS:
            out[k] = _merge(d, v, kp)
        elif k in VALUE_KEYS:
            if not isinstance(v, (str, dict)):
                raise ConfigError(f"{kp}: expected a string or object, got {v!r}")
            out[k] = v
        else:
            out[k] = _check_type(d, v, kp)
    return out


def _check_type(default, value, path):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float) \
                and not value.is_integer():
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return type(default)(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, (str, dict)):
        raise ConfigError(f"{path}: expected a string or object, got {value!r}")
    return value


def parse_config(raw: dict, source: Optional[str] = None, environ=None) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    if isinstance(raw.get("config"), dict):      # a manifest from an earlier run
        raw = raw["config"]
    for k in raw:
        if k not in TOP_KEYS:
            raise ConfigError(f"{k}: unknown key (allowed: {', '.join(sorted(TOP_KEYS))})")
    exp = raw.get("experiment")
    if exp not in RUNNERS:
        raise ConfigError(f"experiment: must be one of {', '.join(RUNNERS)}, got {exp!r}")
    params = _merge(DEFAULTS[exp], raw.get("params", {}), "params")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: expected a non-negative integer")
    workers = raw.get("workers", 1)
    if ENV_WORKERS in environ:
        try:
            workers = int(environ[ENV_WORKERS])
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS}: expected an integer") from None
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        raise ConfigError("workers: expected a positive integer")
    out = environ.get(ENV_OUTPUT, raw.get("output_dir", "results"))
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir: expected a path")
    rt = raw.get("record_timing", False)
    if not isinstance(rt, bool):
        raise ConfigError("record_timing: expected true/false")
    return ExperimentConfig(exp, params, seed, workers, out, rt, source)


def load_config(path, environ=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return parse_config(raw, str(path), environ)


def run_experiment(cfg: ExperimentConfig):
    """Run and persist; outputs are written to a temporary directory and moved into place on success."""
    out = Path(cfg.output_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out.parent))
    try:
        t0 = time.perf_counter()
        result = RUNNERS[cfg.experiment](cfg.params, cfg.seed, cfg.workers)
        result.runtimes["wall"] = time.perf_counter() - t0
        result.save(tmp, cfg.record_timing, {"config": cfg.to_dict(), "package_version": __version__})
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return result


def emit_summary(result_dir) -> tuple[list, bool]:
    """Read summary.csv of a result directory; returns (rows, all passed)."""
    path = Path(result_dir) / "summary.csv"
    if not path.exists():
        raise ConfigError(f"{result_dir}: no summary.csv (not a result directory)")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows, all(r["passed"] == "true" for r in rows)


def _print_checks(rows, stream=None):
    stream = stream or sys.stdout
    for r in rows:
        mark = "PASS" if r["passed"] in ("true", True) else "FAIL"
        print(f"[{mark}] {r['criterion']}: measured {r['measured']} (threshold {r['threshold']})", file=stream)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="rwrelab", description="RWRE and trap-model simulation experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiment described by a JSON config (or manifest)")
    p_run.add_argument("config")
    p_run.add_argument("--output-dir")
    p_run.add_argument("--workers", type=int)
    p_val = sub.add_parser("validate", help="check a config and print the resolved parameters")
    p_val.add_argument("config")
    p_sum = sub.add_parser("summary", help="print pass/fail per criterion for a result directory")
    p_sum.add_argument("result_dir")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "summary":
            rows, ok = emit_summary(args.result_dir)
            _print_checks(rows)
            return 0 if ok else 2
        cfg = load_config(args.config)
        if args.command == "validate":
            print(json.dumps(cfg.to_dict() | {"output_dir": cfg.output_dir}, indent=2, sort_keys=True))
            return 0
        if args.output_dir:
            cfg.output_dir = args.output_dir
        if args.workers:
            if args.workers < 1:
                raise ConfigError("--workers: expected a positive integer")
            cfg.workers = args.workers
        result = run_experiment(cfg)
        _print_checks(result.checks)
        log.info("wrote %s in %.1f s", cfg.output_dir, result.runtimes["wall"])
        return 0 if result.passed else 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (RwreLabError, ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
