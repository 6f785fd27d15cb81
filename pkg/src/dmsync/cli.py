"""Command-line runner: benchmarks, verification suites and the lockstep microtest.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
Every flag can also come from a flat ``key=value`` file passed with
``--config``; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from . import verify
from .bench import MIXES, RunConfig, WorkloadSpec, export_csv, format_csv, run
from .casync import SyncParams
from .kvstore import MODES, Mode, StoreOptions

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
# Desk default; the full 10^5 ops/client is reachable with --ops.
DEFAULT_OPS = 10_000


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _mix(text: str) -> str:
    if text not in MIXES:
        raise argparse.ArgumentTypeError(f"unknown mix {text!r}; choose from {sorted(MIXES)}")
    return text


def _modes(text: str) -> list[str]:
    out = [m.strip() for m in text.split(",") if m.strip()]
    for m in out:
        try:
            Mode.parse(m)
        except ValueError:
            raise argparse.ArgumentTypeError(f"unknown mode {m!r}; choose from {list(MODES)}")
    if not out:
        raise argparse.ArgumentTypeError("empty mode list")
    return out


def read_config(path: str) -> dict[str, str]:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    values = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}")
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k.lstrip("-").replace("-", "_")] = v
    return values


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", type=_modes, default=["cider"],
                   help="mode or comma-separated modes to sweep: " + ", ".join(MODES))
    p.add_argument("--clients", type=int, default=64)
    p.add_argument("--nodes", type=int, default=None, help="default: 4 clients per node")
    p.add_argument("--keys", type=int, default=1_000_000)
    p.add_argument("--theta", type=float, default=0.99)
    p.add_argument("--mix", type=_mix, default="write_intensive")
    p.add_argument("--ops", type=int, default=DEFAULT_OPS, help="operations per client")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", type=_bool, nargs="?", const=True, default=True)
    p.add_argument("--policy", choices=("random", "round_robin"), default="random")
    p.add_argument("--local-wc", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--aimd-factor", type=int, default=SyncParams.aimd_factor)
    p.add_argument("--initial-credit", type=int, default=SyncParams.initial_credit)
    p.add_argument("--hotness-threshold", type=int, default=SyncParams.hotness_threshold)
    p.add_argument("--out", default=None, help="CSV file to append to (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmsync", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="flat key=value file of flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run a workload and export metrics as CSV")
    _add_run_flags(b)

    v = sub.add_parser("verify", help="run a deterministic verification suite")
    v.add_argument("suite", choices=sorted(verify.SUITES))
    v.add_argument("--seed", type=int, default=None, help="replay a single seed")
    v.add_argument("--seeds", type=int, default=None, help="number of seeds to sweep")
    v.add_argument("--mode", type=_modes, default=None, help="restrict linearizability modes")
    v.add_argument("--mutation", choices=("skip-version-bump",), default=None,
                   help="run against a deliberately broken build")
    v.add_argument("--witness", default=None, help="write failures as JSON here")

    m = sub.add_parser("microtest", help="lockstep single-key drill in osync and cider")
    m.add_argument("--clients", "-n", type=int, default=4)
    parser.commands = {"bench": b, "verify": v, "microtest": m}
    return parser


def parse(argv: Sequence[str] | None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        values = read_config(known.config)
        args = parser.parse_args(argv)
        unknown = sorted(set(values) - (set(vars(args)) - {"command", "config"}))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {unknown}")
        parser.commands[args.command].set_defaults(**values)
    # String defaults pass through each flag's type, so file values are validated too.
    return parser.parse_args(argv)


# -- commands -------------------------------------------------------------------


def run_configs(args: argparse.Namespace) -> list[RunConfig]:
    workload = WorkloadSpec(mix=args.mix, theta=args.theta, key_count=args.keys,
                            ops_per_client=args.ops, seed=args.seed)
    params = SyncParams(aimd_factor=args.aimd_factor, initial_credit=args.initial_credit,
                        hotness_threshold=args.hotness_threshold)
    out = []
    for mode in args.mode:
        if args.local_wc and "+lwc" not in mode:
            mode += "+lwc"
        Mode.parse(mode)
        out.append(RunConfig(mode=mode, clients=args.clients, nodes=args.nodes,
                             workload=workload, params=params,
                             deterministic=args.deterministic, policy=args.policy))
    return out


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        configs = run_configs(args)
    except ValueError as e:
        raise UsageError(str(e))
    reports = []
    for cfg in configs:
        try:
            report, _ = run(cfg)
        except ValueError as e:
            raise UsageError(str(e))
        reports.append(report)
        print(report.summary(), file=sys.stderr)
        if args.out:
            export_csv(report, args.out)
    if not args.out:
        sys.stdout.write(format_csv(reports))
    if len(reports) > 1:
        print(comparison_table(reports), file=sys.stderr)
    return EXIT_OK


def comparison_table(reports) -> str:
    base = reports[0].verbs_per_op
    lines = [f"{'mode':<16}{'verbs/op':>10}{'vs ' + reports[0].mode:>16}{'wc_rate':>9}"
             f"{'ptr_cas_fail':>14}{'p99':>8}"]
    for r in reports:
        lines.append(f"{r.mode:<16}{r.verbs_per_op:>10.3f}{r.verbs_per_op / base:>16.3f}"
                     f"{r.wc_rate:>9.3f}{r.ptr_cas_failures:>14}{r.latency_p99:>8g}")
    return "\n".join(lines)


def cmd_verify(args: argparse.Namespace) -> int:
    options = StoreOptions(skip_delete_version_bump=True) if args.mutation else None
    span = {}
    if args.seed is not None:
        span = {"start": args.seed, "seeds": args.seeds or 1}
    elif args.seeds is not None:
        span = {"seeds": args.seeds}
    if args.suite == "linearizability":
        modes = [Mode.parse(m) for m in args.mode] if args.mode else verify.ALL_MODES
        res = verify.linearizability_suite(modes=modes, options=options, **span)
    elif args.suite == "fencing":
        kw = {"random_seeds": span["seeds"]} if "seeds" in span else {}
        res = verify.fencing_suite(options, **kw)
    elif args.suite == "gwc":
        res = verify.gwc_suite(**span)
    else:
        res = verify.epoch_suite()
    status = "PASS" if res.ok else "FAIL"
    print(f"{res.name}: {status} ({res.runs} runs, {len(res.failures)} failures)")
    if res.ok:
        return EXIT_OK
    dump = json.dumps(res.failures, indent=1, default=str)
    if args.witness:
        with open(args.witness, "w") as f:
            f.write(dump)
        print(f"witness written to {args.witness}")
    else:
        print(dump)
    return EXIT_FAIL


def cmd_microtest(args: argparse.Namespace) -> int:
    n = args.clients
    if n < 2:
        raise UsageError("microtest needs at least 2 clients")
    osync = verify.lockstep("osync", n)
    cider = verify.lockstep("cider", n)
    print(f"lockstep n={n}: expected osync retries n(n-1)/2 = {n * (n - 1) // 2}")
    for r in (osync, cider):
        print(f"  {r.mode:<6} ptr_cas_failures={r.ptr_cas_failures} verbs={r.verbs} "
              f"verbs/op={r.verbs_per_op:.2f} messages={r.messages} combined={r.combined}")
    print(f"  verb ratio osync/cider = {osync.verbs / cider.verbs:.2f}")
    return EXIT_OK


COMMANDS = {"bench": cmd_bench, "verify": cmd_verify, "microtest": cmd_microtest}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"dmsync: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # argparse exits 2 on bad usage and 0 on --help.
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
