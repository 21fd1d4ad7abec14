"""Command-line entry point ``unstable-lab``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import apply_overrides, load_config, paper_scale
from .errors import UnstableLabError

COMMANDS = ("simulate", "lyapunov", "psi", "benchmark", "bounds", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unstable-lab",
                                description="Lyapunov, unfiltered-error and Kalman-filter "
                                            "experiments on Lorenz-96.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH", help="JSON configuration file")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--paper-scale", action="store_true",
                   help="use long spin-up and averaging windows")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set filter.K_avg=2000 (repeatable)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for benchmark cells")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    config = load_config(args.config)
    if args.paper_scale:
        config = paper_scale(config)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    return apply_overrides(config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        if args.command == "simulate":
            props = harness.cmd_simulate(config)
            print(f"{len(props)} propagators (n={props.n}), hash {config.hash('simulate')[:12]}")
        elif args.command == "lyapunov":
            s = harness.cmd_lyapunov(config)
            print(f"n0 = {s['n0']}; lambda per step: "
                  + " ".join(f"{x:.4f}" for x in s["lambda_per_step"]))
        elif args.command == "psi":
            s = harness.cmd_psi(config)
            print(" ".join(f"mean_psi_{i}={s[f'mean_psi_{i}']:.4g}" for i in s["modes"]))
        elif args.command == "benchmark":
            s = harness.cmd_benchmark(config, jobs=args.jobs)
            for c in s["cells"]:
                print(f"{c['kind']:8s} {c['d']:3d} {c['mean_frobenius']:.4f}")
        elif args.command == "bounds":
            s = harness.cmd_bounds(config)
            print(f"criterion (full obs) ratio {s['criterion_full']['ratio']:.4f}; "
                  f"unobserved ratio {s['criterion_unobserved']['ratio']:.4f}")
        else:
            _, code = harness.cmd_report(config)
            print((Path(config.output_dir) / "report.txt").read_text(), end="")
            return code
    except UnstableLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
