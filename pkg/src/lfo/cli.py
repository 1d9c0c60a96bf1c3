"""``lfo`` command line entry point."""
from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import config_dump, load_config
from .errors import ConfigError, DependencyError, NumericError
from .parallel import set_reference
from .pipeline import COMMANDS, StageError, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC, EXIT_OTHER = 0, 2, 3, 4, 1


def build_parser():
    p = argparse.ArgumentParser(prog="lfo", description="Run experiment stages.")
    p.add_argument("command", choices=COMMANDS + ("config-dump",))
    p.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    p.add_argument("--out", help="output directory (required except for config-dump)")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--reference", action="store_true",
                   help="single-threaded, bit-reproducible reference mode")
    p.add_argument("--quiet", action="store_true")
    return p


def _exit_code(exc):
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, DependencyError):
        return EXIT_DEPENDENCY
    if isinstance(cause, NumericError):
        return EXIT_NUMERIC
    return EXIT_OTHER


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        if args.command == "config-dump":
            sys.stdout.write(config_dump(config))
            return EXIT_OK
        if not args.out:
            raise ConfigError("--out is required")
        set_reference(args.reference)
        log = (lambda *a: None) if args.quiet else (lambda *a: print(*a, flush=True))
        run_stage(args.command, config, args.out, log)
    except (ConfigError, DependencyError, NumericError, StageError) as exc:
        print(f"lfo: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
