"""Sweep Zipf skew across synchronization modes and append one CSV row per run.

Example:
    python3 scripts/skew_sweep.py --modes osync,mcs,cider --thetas 0,0.5,0.9,0.99 \
        --clients 64 --ops 1000 --out results/skew.csv
"""

from __future__ import annotations

import argparse
import os

from dmsync.bench import RunConfig, WorkloadSpec, export_csv, run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--modes", default="osync,cas_backoff,mcs,cider")
    ap.add_argument("--thetas", default="0,0.5,0.8,0.9,0.99")
    ap.add_argument("--clients", type=int, default=64)
    ap.add_argument("--keys", type=int, default=1_000_000)
    ap.add_argument("--ops", type=int, default=1000)
    ap.add_argument("--mix", default="write_intensive")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/skew_sweep.csv")
    args = ap.parse_args()

    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    modes = args.modes.split(",")
    thetas = [float(t) for t in args.thetas.split(",")]
    print(f"{'theta':>6} " + " ".join(f"{m:>14}" for m in modes) + "   (verbs per committed op)")
    for theta in thetas:
        cells = []
        for mode in modes:
            cfg = RunConfig(mode=mode, clients=args.clients,
                            workload=WorkloadSpec(mix=args.mix, theta=theta, key_count=args.keys,
                                                  ops_per_client=args.ops, seed=args.seed))
            report, _ = run(cfg)
            export_csv(report, args.out)
            cells.append(f"{report.verbs_per_op:>14.3f}")
        print(f"{theta:>6.2f} " + " ".join(cells), flush=True)
    print(f"rows appended to {args.out}")


if __name__ == "__main__":
    main()
