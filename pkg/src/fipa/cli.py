"""Command-line entry point: ``run``, ``sweep`` and ``oracle-check``."""
import argparse
import json
import sys

import yaml

from .config import ConfigError, load_config, set_path
from .oracles import SUITES, run_oracle_suites
from .runner import resolve_output_dir, run_config, write_outputs


def _error(kind, message, **extra):
    record = {"error": kind, "message": message}
    record.update(extra)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def _run_one(cfg, out_dir, workers):
    records, _ = run_config(cfg, workers=workers)
    for path in write_outputs(cfg, records, out_dir):
        print(f"wrote {path}")
    last = records[-1]
    print(f"{len(records)} rounds, final test metric {last.test_metric:.6g}")


def cmd_run(args):
    cfg = load_config(args.config)
    _run_one(cfg, resolve_output_dir(cfg, args.out), args.workers)
    return 0


def _parse_values(text):
    # each comma-separated entry is read as a YAML scalar, so 1e-3 and true get their types
    return [yaml.safe_load(v.strip()) for v in text.split(",") if v.strip()]


def cmd_sweep(args):
    base = load_config(args.config)
    values = _parse_values(args.values)
    if not values:
        raise ConfigError([("--values", "no values given")])
    # validate every variant before running any of them
    variants = [(v, set_path(base, args.param, v)) for v in values]
    root = resolve_output_dir(base, args.out)
    for value, cfg in variants:
        out = root.parent / f"{root.name}__{args.param.rsplit('.', 1)[-1]}={value}"
        print(f"{args.param} = {value}")
        _run_one(cfg, out, args.workers)
    return 0


def cmd_oracle_check(args):
    results = run_oracle_suites(perturb=tuple(args.perturb or ()))
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: error {r.error:.3e} (tol {r.tol:.0e}) {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failing suites: {', '.join(failed)}")
        return 1
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fipa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a YAML config")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=1, help="client worker threads (1 = sequential)")
    run.add_argument("--out", help="output directory (overrides config and environment)")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="one run per value of a config parameter")
    sweep.add_argument("config")
    sweep.add_argument("--param", required=True, help="dotted key, e.g. federation.lr")
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--workers", type=int, default=1)
    sweep.add_argument("--out")
    sweep.set_defaults(func=cmd_sweep)

    oc = sub.add_parser("oracle-check", help="cross-check numerical routes against oracles")
    # negative-control hook: corrupt the named suite's candidate and expect a failure
    oc.add_argument("--perturb", action="append", choices=sorted(SUITES), help=argparse.SUPPRESS)
    oc.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        _error("invalid_argument", "--workers must be >= 1")
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps(exc.as_record(), sort_keys=True), file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        _error("file_not_found", str(exc))
        return 2
    except Exception as exc:  # report any failure as a machine-readable record
        _error(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
