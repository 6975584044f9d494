"""Command-line entry point.

Exit codes: 0 success, 1 a failed validation check, 2 usage or config error.
The master seed is taken from ``--seed``, else ``PERFOPT_SEED``, else the config.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from perfopt import environments as envs
from perfopt.errors import PerfOptError
from perfopt.harness import emit
from perfopt.harness.config import PRESET_NOTES, PRESETS, ConfigError, ExperimentConfig, config_to_dict, load_config
from perfopt.harness.runner import default_threads, run_experiment, run_sweep
from perfopt.harness.validate import CHECKS, opt_checks

logger = logging.getLogger("perfopt")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="master seed (overrides PERFOPT_SEED and the config)")
    p.add_argument("--out-dir", help="output directory (default from the config)")
    p.add_argument("--trials", type=int, help="override the number of trials")
    p.add_argument("--threads", type=int, help="worker processes (default: available CPUs)")
    p.add_argument("--format", choices=("csv", "json", "both"), help="what to write (default from the config)")


def _k_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError("k values must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="perfopt", description="Stateful performative optimization experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run the optimizers listed in a config (its grid if none are listed)")
    p.add_argument("config", help="config file or preset:<name>")
    _common(p)
    p = sub.add_parser("grid", help="run the full hyperparameter grid for every method")
    p.add_argument("config")
    _common(p)
    p = sub.add_parser("sweep", help="grid search at each settle count k, best cell per method")
    p.add_argument("config")
    p.add_argument("--k-list", type=_k_list, help="comma-separated settle counts, e.g. 1,8,64")
    _common(p)
    p = sub.add_parser("validate", help="run the property checks and print a pass/fail table")
    p.add_argument("--only", help="comma-separated check ids to run (default: all)")
    sub.add_parser("presets", help="list the built-in presets")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    env_seed = os.environ.get("PERFOPT_SEED")
    if args.seed is not None:
        updates["master_seed"] = args.seed
    elif env_seed:
        try:
            updates["master_seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"PERFOPT_SEED must be an integer, got {env_seed!r}") from None
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        updates["trials"] = args.trials
    output = cfg.output.model_copy(update={k: v for k, v in (("out_dir", args.out_dir), ("format", args.format))
                                           if v is not None})
    updates["output"] = output
    if updates.get("master_seed", 0) < 0:
        raise ConfigError("seed must be nonnegative")
    return cfg.model_copy(update=updates)


def _threads(args) -> int:
    if args.threads is None:
        return default_threads()
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return args.threads


def _cmd_experiment(args, use_grid: bool) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    spec = cfg.build_spec()
    opt = envs.opt_reference(spec)
    reports = opt_checks(spec, opt[0])
    failed = [r.quantity for r in reports if r.passed is False]
    if failed:
        logger.error("OPT reference failed its checks: %s", failed)
        return EXIT_FAIL
    result = run_experiment(cfg, use_grid=use_grid, threads=_threads(args), opt=opt)
    out = Path(cfg.output.out_dir)
    fmt = cfg.output.format
    written = []
    if fmt in ("csv", "both"):
        written.append(emit.emit_csv(result, out / f"{cfg.id}.csv", rows=cfg.output.rows))
    if fmt in ("json", "both"):
        written.append(emit.emit_summary_json(result, reports, out / f"{cfg.id}.json", config=config_to_dict(cfg)))
    for m in result.methods:
        best = result.best[m]
        frac, se = best.final_frac_opt
        print(f"{m:7s} best {best.config.label():40s} frac_opt {frac:.4f} +- {se:.4f}")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    k_list = args.k_list or cfg.k_list
    if not k_list:
        raise ConfigError("sweep needs --k-list or k_list in the config")
    points = run_sweep(cfg, k_list, use_grid=True, threads=_threads(args))
    out = Path(cfg.output.out_dir)
    fmt = cfg.output.format
    if fmt in ("csv", "both"):
        print(f"wrote {emit.emit_sweep_csv(points, out / f'{cfg.id}-sweep.csv')}")
    if fmt in ("json", "both"):
        print(f"wrote {emit.emit_sweep_json(points, out / f'{cfg.id}-sweep.json', config=config_to_dict(cfg))}")
    for p in points:
        row = "  ".join(f"{m} {c.final_frac_opt[0]:.4f}" for m, c in p.result.best.items())
        print(f"k={p.k:g}  {row}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    ids = list(CHECKS) if not args.only else [x.strip() for x in args.only.split(",")]
    unknown = [i for i in ids if i not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown check ids {unknown}; known: {list(CHECKS)}")
    failures = 0
    for i in ids:
        res = CHECKS[i]()
        failures += not res.passed
        print(f"[{i:>2}] {res.line()}")
    print(f"{len(ids) - failures}/{len(ids)} checks passed")
    return EXIT_FAIL if failures else EXIT_OK


def _cmd_presets(_args) -> int:
    for name in PRESETS:
        print(f"{name:16s} {PRESET_NOTES[name]}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_experiment(args, use_grid=False)
        if args.command == "grid":
            return _cmd_experiment(args, use_grid=True)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "validate":
            return _cmd_validate(args)
        return _cmd_presets(args)
    except ConfigError as err:
        print(f"perfopt: config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except PerfOptError as err:
        print(f"perfopt: error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
