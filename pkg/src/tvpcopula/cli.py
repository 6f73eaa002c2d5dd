"""Command-line entry point: ``tvpcopula {run,validate,resume,score,sensitivity} CONFIG``.

Success prints a JSON summary on stdout and exits 0. Failure prints
``{"status": "error", "error": {...}}`` on stdout and exits 1 (runtime
failure) or 2 (invalid configuration or arguments).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tvpcopula", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb, help_ in (("run", "run or continue the full pipeline"),
                        ("validate", "check a config and print its normalised form"),
                        ("resume", "continue an interrupted run (fails if none exists)")):
        s = sub.add_parser(verb, help=help_)
        s.add_argument("config")
    s = sub.add_parser("score", help="recompute score tables against a benchmark MSFE CSV")
    s.add_argument("config")
    s.add_argument("--benchmark", required=True, help="CSV with columns variant,variable,h1..hH")
    s.add_argument("--benchmark-variant", default=None, help="row group to use (default: first)")
    s = sub.add_parser("sensitivity", help="prior-sensitivity replicates of a completed run")
    s.add_argument("config")
    s.add_argument("--priors", type=int, default=100)
    s.add_argument("--iterations", type=int, default=1000)
    s.add_argument("--bins", type=int, default=20)
    return p


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n")


def _error(kind, message, **extra) -> dict:
    return {"status": "error", "error": {"type": kind, "message": message, **extra}}


def _summary(cfg, manifest) -> dict:
    return {"status": "ok", "output": cfg.output, "master_seed": manifest.master_seed,
            "seed_defaulted": manifest.seed_defaulted,
            "stages": {k: {"status": v.status, "wall_clock": v.wall_clock} for k, v in manifest.stages.items()}}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except _UsageError as exc:
        _emit(_error("UsageError", str(exc)))
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = pipeline.validate_config(args.config)
        if args.verb == "validate":
            _emit({"status": "ok", "config": cfg.to_dict(), "seed_defaulted": cfg.seed_defaulted})
            return EXIT_OK
        if args.verb in ("run", "resume"):
            manifest = pipeline.run(cfg, resume_only=args.verb == "resume")
            _emit(_summary(cfg, manifest))
        elif args.verb == "score":
            arts = pipeline.rescore(cfg, args.benchmark, args.benchmark_variant)
            _emit({"status": "ok", "artifacts": arts})
        else:
            if args.priors < 1 or args.iterations < 1 or args.bins < 1:
                raise pipeline.ConfigError([{"field": "--priors/--iterations/--bins", "message": "must be >= 1"}])
            arts = pipeline.run_sensitivity(cfg, args.priors, args.iterations, args.bins)
            _emit({"status": "ok", "artifacts": arts})
        return EXIT_OK
    except pipeline.ConfigError as exc:
        _emit(_error("ConfigError", str(exc), details=exc.errors))
        return EXIT_CONFIG
    except pipeline.StageFailed as exc:
        _emit(_error(type(exc.cause).__name__, str(exc.cause), stage=exc.stage))
        return EXIT_FAILED
    except Exception as exc:  # noqa: BLE001 - every failure must become JSON
        _emit(_error(type(exc).__name__, str(exc)))
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
