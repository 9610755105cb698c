"""Command-line driver.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 configuration
error, 4 data-integrity error (bad snapshot, failed exchange, failed check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from bulbsim import __version__
from bulbsim.errors import BulbError, ConfigError, IntegrityError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG, EXIT_INTEGRITY = 0, 1, 2, 3, 4

log = logging.getLogger("bulbsim")


def _split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Pull ``--section.key=value`` / ``--section.key value`` flags out of argv."""
    rest, overrides = [], []
    i = 0
    while i < len(argv):
        arg = argv[i]
        name = arg[2:].split("=", 1)[0] if arg.startswith("--") else ""
        if "." in name:
            if "=" in arg:
                overrides.append(arg[2:])
            elif i + 1 < len(argv):
                overrides.append(f"{name}={argv[i + 1]}")
                i += 1
            else:
                raise ConfigError(f"flag --{name} needs a value")
        else:
            rest.append(arg)
        i += 1
    return rest, overrides


def _config(args, overrides):
    from bulbsim.config import load_config

    return load_config(args.config, overrides)


def cmd_run(args, overrides) -> int:
    from bulbsim.driver import run

    cfg = _config(args, overrides)
    result = run(cfg, out_dir=args.out, threads=args.threads)
    print(f"config_hash {cfg.hash}")
    print(f"ranks {len(result.plan)}  steps {result.steps}  r_final {result.ranks[0].ensemble.r:.10g}  "
          f"elapsed {result.elapsed:.3f} s  max_norm_drift {result.max_norm_drift:.3e}")
    if result.out_dir is not None:
        print(f"wrote {len(result.files)} snapshot(s) to {result.out_dir}")
    return EXIT_OK


def cmd_partition(args, overrides) -> int:
    from bulbsim.driver import build_plan
    from bulbsim.topology import equal_plan

    cfg = _config(args, overrides)
    if args.ranks is not None:
        n_theta = args.n_theta if args.n_theta is not None else cfg["grid.n_theta"]
        threads = args.threads if args.threads is not None else cfg["devices.cpu.threads"]
        plan = equal_plan(n_theta, args.ranks, threads, cfg["run.chunk_size"])
    else:
        if args.n_theta is not None:
            cfg = cfg.with_overrides(grid__n_theta=args.n_theta)
        plan = build_plan(cfg, args.threads)
    print(plan.table())
    return EXIT_OK


def cmd_bench(args, overrides) -> int:
    from bulbsim import bench

    cfg = _config(args, overrides)
    if args.kernel == "steps":
        duration = args.duration if args.duration is not None else cfg["bench.duration"]
        reports = [bench.measure_steps_per_second(cfg, duration, threads=args.threads)]
    else:
        kernel = "flops" if args.kernel == "flops" else args.kind
        threads = args.threads if args.threads is not None else cfg["bench.threads"]
        widths = [args.width] if args.width else cfg.widths
        iterations = args.iterations if args.iterations else cfg["bench.iterations"]
        reports = bench.sweep(kernel, widths, iterations, threads, lane_hint=cfg["bench.lane_hint"],
                              config_hash=cfg.hash)
    if args.csv:
        bench.write_csv(reports, args.csv)
    sys.stdout.write(bench.format_csv(reports))
    return EXIT_OK


def cmd_inspect(args, overrides) -> int:
    from bulbsim.snapshot import read_snapshot, summarize

    if overrides:
        raise ConfigError("inspect takes no configuration overrides")
    info = summarize(read_snapshot(args.snapshot))
    width = max(len(k) for k in info)
    for k, v in info.items():
        print(f"{k:<{width}}  {v}")
    return EXIT_OK


def cmd_validate(args, overrides) -> int:
    from bulbsim.oracles import run_validation

    ok = True
    for check in run_validation(args.trials):
        print(f"{'PASS' if check.passed else 'FAIL'}  {check.name:<12} {check.detail}")
        ok &= check.passed
    return EXIT_OK if ok else EXIT_INTEGRITY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bulbsim",
        description="Collective neutrino oscillations in the extended bulb model.",
        epilog="Any config key can be overridden as --section.key=value (e.g. --grid.n_theta=64).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for debug)")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(p, out=False):
        p.add_argument("--config", type=Path, help="INI-style config file")
        p.add_argument("--threads", type=int, help="worker threads per rank (overrides devices.*.threads)")
        if out:
            p.add_argument("--out", type=Path, help="output directory (overrides io.out_dir)")

    p = sub.add_parser("run", help="run a simulation")
    common(p, out=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("partition", help="print the rank plan without computing")
    common(p)
    p.add_argument("--n-theta", type=int, help="number of theta bins (default grid.n_theta)")
    p.add_argument("--ranks", type=int, help="equal-weight cpu ranks instead of the configured devices")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("bench", help="microkernels and steps/s harness")
    p.add_argument("kernel", choices=("flops", "transc", "steps"))
    common(p)
    p.add_argument("--kind", choices=("sincos", "exp"), default="sincos", help="transcendental kernel")
    p.add_argument("--width", type=int, help="single vector width instead of bench.widths")
    p.add_argument("--iterations", type=int, help="iterations per thread (default bench.iterations)")
    p.add_argument("--duration", type=float, help="seconds for the steps harness (default bench.duration)")
    p.add_argument("--csv", type=Path, help="also write the report to this CSV file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print a snapshot header and summary statistics")
    p.add_argument("snapshot", type=Path)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("validate", help="run the built-in oracle checks")
    p.add_argument("--trials", type=int, default=10, help="random ensembles for the potential check")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        rest, overrides = _split_overrides(argv)
    except ConfigError as exc:
        print(f"bulbsim: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(rest)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, overrides)
    except BulbError as exc:
        print(f"bulbsim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # anything unexpected is a runtime failure, not a crash dump
        log.debug("unhandled error", exc_info=True)
        print(f"bulbsim: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
