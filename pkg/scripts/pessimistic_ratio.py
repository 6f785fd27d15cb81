"""How often cider goes pessimistic as skew grows, against an ideal oracle.

The ideal ratio counts updates that needed at least ``hotness_threshold``
CAS retries in the run, the updates that would have benefited from the lock.
Also reports where pessimism lands (top-decile keys) and how much of it
combined.

Example:
    python3 scripts/pessimistic_ratio.py --clients 64 --ops 1000
"""

from __future__ import annotations

import argparse

from dmsync.bench import RunConfig, WorkloadSpec, run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--thetas", default="0,0.6,0.8,0.9,0.99")
    ap.add_argument("--clients", type=int, default=64)
    ap.add_argument("--keys", type=int, default=1_000_000)
    ap.add_argument("--ops", type=int, default=1000)
    ap.add_argument("--mix", default="write_intensive")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"{'theta':>6}{'pess_ratio':>12}{'ideal':>9}{'hot_pess':>10}{'hot_traffic':>13}"
          f"{'pess_wc_rate':>14}{'batch_avg':>11}")
    for theta in (float(t) for t in args.thetas.split(",")):
        cfg = RunConfig(mode="cider", clients=args.clients,
                        workload=WorkloadSpec(mix=args.mix, theta=theta, key_count=args.keys,
                                              ops_per_client=args.ops, seed=args.seed))
        r, _ = run(cfg)
        print(f"{theta:>6.2f}{r.pessimistic_ratio:>12.4f}{r.ideal_pessimistic_ratio:>9.4f}"
              f"{r.hot_share_pessimistic:>10.3f}{r.hot_share_traffic:>13.3f}"
              f"{r.pessimistic_wc_rate:>14.3f}{r.wc_batch_avg:>11.2f}", flush=True)


if __name__ == "__main__":
    main()
