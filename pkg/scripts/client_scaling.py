"""Verbs per committed op as the client count grows, on a hot-key workload.

The largest point, 512 clients over 128 compute nodes, is the scale-up target;
expect it to take several minutes in pure Python.

Example:
    python3 scripts/client_scaling.py --clients 8,16,32,64 --ops 200
"""

from __future__ import annotations

import argparse

from dmsync.bench import RunConfig, WorkloadSpec, run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clients", default="8,16,32,64")
    ap.add_argument("--modes", default="osync,mcs,cider")
    ap.add_argument("--theta", type=float, default=0.99)
    ap.add_argument("--keys", type=int, default=1000)
    ap.add_argument("--ops", type=int, default=200)
    ap.add_argument("--mix", default="write_only")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    modes = args.modes.split(",")
    print(f"{'clients':>8} " + " ".join(f"{m:>10}" for m in modes))
    for n in (int(c) for c in args.clients.split(",")):
        cells = []
        for mode in modes:
            cfg = RunConfig(mode=mode, clients=n, policy="round_robin",
                            workload=WorkloadSpec(mix=args.mix, theta=args.theta,
                                                  key_count=args.keys, ops_per_client=args.ops,
                                                  seed=args.seed))
            cells.append(f"{run(cfg)[0].verbs_per_op:>10.3f}")
        print(f"{n:>8} " + " ".join(cells), flush=True)


if __name__ == "__main__":
    main()
