"""Command-line entry point: ``unlearnlab <stage> --config cfg.json --out runs/x``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import engine
from .pipeline import STAGES, ConfigError, Run, default_config, load_config, save_config, write_report


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearnlab", description="Toy unlearning laboratory pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "all"):
        sp = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage")
        sp.add_argument("--config", help="JSON pipeline config (default: built-in six-method study)")
        sp.add_argument("--out", help="run directory (overrides out_dir in the config)")
        sp.add_argument("--seed", type=int, help="override the global seed")
        sp.add_argument("--stages", help="comma-separated stage list (with 'all')")
        sp.add_argument("--force", action="store_true", help="rerun the named stage even if complete")
        sp.add_argument("-v", "--verbose", action="store_true")
    dump = sub.add_parser("default-config", help="print the built-in config as JSON")
    dump.add_argument("--out", help="write to this file instead of stdout")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    engine.configure_threads()
    if args.command == "default-config":
        cfg = default_config()
        if args.out:
            save_config(cfg, args.out)
        else:
            import json

            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "report" and not args.config:
        if not args.out:
            print("report needs --out (the run directory)", file=sys.stderr)
            return 2
        try:
            path = write_report(args.out)
        except FileNotFoundError:
            print(f"no runs found in {args.out}")
            return 1
        print(path.read_text(), end="")
        return 0

    try:
        cfg = load_config(args.config) if args.config else default_config()
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.command == "all":
            stages = tuple(s.strip() for s in args.stages.split(",")) if args.stages else STAGES
        else:
            stages = (args.command,)
        run = Run(cfg, args.out)
        status = run.execute(stages, force=args.force)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if "report" in stages and status == 0:
        print((run.dir / "summary.csv").read_text(), end="")
    for stage, info in run.manifest()["stages"].items():
        if info["status"] != "done":
            print(f"stage {stage}: {info['status']} {info.get('detail', '')}".rstrip(), file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
