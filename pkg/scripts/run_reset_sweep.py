#!/usr/bin/env python3
"""Success rate as a function of the reset budget.

Sweeps the number of initialization resets (optionally the candidate
count eta as well) white-box against the first model seed, to show how
much of the attack comes from restarting versus refining. Writes
PREFIX.csv.
"""

import argparse
import csv
import time

from common import add_world_args, build_world
from ncf.attack import AttackConfig, ncf_attack


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    add_world_args(parser)
    parser.add_argument("--resets-list", default="1,2,3,5,10")
    parser.add_argument("--eta-list", default="50")
    parser.add_argument("--iters", type=int, default=15)
    parser.add_argument("--eps", type=float, default=0.2)
    parser.add_argument("--momentum", type=float, default=0.6)
    parser.add_argument("--out", default="reset_sweep")
    args = parser.parse_args()

    world = build_world(args)
    model = world["models"][0]
    test = world["test"]
    print(f"setup {world['setup_seconds']:.0f}s, sweeping against {model.name} "
          f"(clean error {world['clean_error'][model.name]:.3f})")

    rows = []
    for eta in (int(x) for x in args.eta_list.split(",")):
        for resets in (int(x) for x in args.resets_list.split(",")):
            block = time.perf_counter()
            wins = 0
            for idx, sample in enumerate(test):
                config = AttackConfig(
                    eta=eta, iterations=args.iters, resets=resets,
                    epsilon=args.eps, momentum=args.momentum, seed=idx,
                )
                result = ncf_attack(
                    sample.image, sample.label, sample.mask,
                    model, world["library"], config, "ncf",
                )
                wins += int(result.success[model.name])
            seconds = time.perf_counter() - block
            rate = wins / len(test)
            rows.append([eta, resets, f"{rate:.4f}", f"{seconds:.1f}"])
            print(f"eta {eta:3d} resets {resets:3d}: success {100 * rate:5.1f}%  ({seconds:.0f}s)")

    with open(f"{args.out}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eta", "resets", "success_rate", "seconds"])
        writer.writerows(rows)
    print(f"wrote {args.out}.csv")


if __name__ == "__main__":
    main()
