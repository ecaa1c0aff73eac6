"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (a JSON
diagnostic dump is written next to the requested output).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from powertalk import __version__

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
OUTPUT_ENV = "POWERTALK_OUTPUT_DIR"

COMMANDS = ("solve", "train", "estimate", "crlb", "doed", "sweep-rrmse", "sweep-rci")

log = logging.getLogger("powertalk")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="powertalk",
        description="Training-epoch simulation, estimation, bounds and dispatch for DC microgrids.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "solve": "steady state at nominal droop",
        "train": "simulate one training epoch",
        "estimate": "run every controller's estimator on one epoch",
        "crlb": "bound RRMSE per controller",
        "doed": "one OED epoch with decentralized dispatch",
        "sweep-rrmse": "estimator RRMSE and bound versus sqrt_pi",
        "sweep-rci": "average RCI/QRCI surface over (tau, sqrt_pi)",
    }
    for name in COMMANDS:
        s = sub.add_parser(name, help=helps[name])
        s.add_argument("--config", required=True, help="YAML scenario file")
        s.add_argument("--seed", type=int, default=None, help="master seed (overrides the file)")
        s.add_argument("--trials", type=int, default=None, help="Monte Carlo trials per point")
        s.add_argument("--out", default=None, help="output CSV path")
        s.add_argument("--parallel", type=int, default=1, help="worker processes")
        s.add_argument("--debug", action="store_true", help="verbose logging and tracebacks")
    return p


def _output_path(args, scn) -> Path:
    if args.out:
        return Path(args.out)
    base = os.environ.get(OUTPUT_ENV) or scn.output_dir or "."
    return Path(base) / f"{args.command}.csv"


def _dispatch(args, scn):
    from powertalk import experiments as ex

    seed = scn.seed
    trials = scn.trials
    if args.command == "solve":
        return ex.run_solve(scn)
    if args.command == "train":
        return ex.run_train(scn, seed)
    if args.command == "estimate":
        return ex.run_estimate(scn, seed)
    if args.command == "crlb":
        return ex.run_crlb(scn)
    if args.command == "doed":
        return ex.run_doed(scn, seed)
    if args.command == "sweep-rrmse":
        return ex.sweep_rrmse(scn, trials, seed, args.parallel)
    if args.command == "sweep-rci":
        return ex.sweep_rci(scn, trials, seed, args.parallel)
    raise AssertionError(args.command)


def _write_manifest(path: Path, args, scn, elapsed: float, table=None):
    from powertalk.rng import PURPOSES, SCHEME

    man = {
        "command": args.command,
        "config": str(args.config),
        "scenario": scn.to_dict(),
        "scenario_hash": scn.digest(),
        "seed": scn.seed,
        "trials": scn.trials,
        "parallel": args.parallel,
        "code_version": __version__,
        "rng": {"scheme": SCHEME, "purposes": PURPOSES},
        "elapsed_s": round(elapsed, 3),
    }
    if table is not None:
        man["csv"] = str(path)
        man["rows"] = len(table.rows)
    mpath = path.with_suffix(".manifest.json")
    mpath.write_text(json.dumps(man, indent=2, sort_keys=True, default=_json_default))
    return mpath


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def main(argv=None) -> int:
    from powertalk.errors import PowertalkError
    from powertalk.scenario import ConfigError, load_scenario

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.trials is not None and args.trials < 1:
            raise ConfigError("--trials must be positive")
        if args.parallel < 1:
            raise ConfigError("--parallel must be positive")
        scn = load_scenario(args.config, seed=args.seed, trials=args.trials)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _output_path(args, scn)
    t0 = time.perf_counter()
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            table = _dispatch(args, scn)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PowertalkError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        dump = out.with_suffix(".failure.json")
        dump.parent.mkdir(parents=True, exist_ok=True)
        info = {
            "command": args.command,
            "error": type(exc).__name__,
            "message": str(exc),
            "traceback": traceback.format_exc(),
            "scenario": scn.to_dict(),
            "seed": scn.seed,
        }
        dump.write_text(json.dumps(info, indent=2, default=_json_default))
        print(f"numerical failure ({type(exc).__name__}): {exc}; diagnostics in {dump}",
              file=sys.stderr)
        if args.debug:
            traceback.print_exc()
        return EXIT_NUMERIC
    table.write(out)
    _write_manifest(out, args, scn, time.perf_counter() - t0, table)
    log.info("wrote %s", out)
    print(out)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
