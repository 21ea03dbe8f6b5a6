#!/usr/bin/env python3
"""Variant ablation on the synthetic dataset.

Runs every attack variant white-box against each trained model and
tabulates success rates. Writes PREFIX.json and PREFIX.csv.
"""

import argparse
import csv
import json
import time

import numpy as np

from common import add_world_args, build_world
from ncf.attack import VARIANTS, AttackConfig, ncf_attack


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    add_world_args(parser)
    parser.add_argument("--variants", default=",".join(VARIANTS))
    parser.add_argument("--eta", type=int, default=50)
    parser.add_argument("--iters", type=int, default=15)
    parser.add_argument("--resets", type=int, default=10)
    parser.add_argument("--eps", type=float, default=0.2)
    parser.add_argument("--momentum", type=float, default=0.6)
    parser.add_argument("--out", default="ablation")
    args = parser.parse_args()

    world = build_world(args)
    test = world["test"]
    print(f"setup {world['setup_seconds']:.0f}s, clean error "
          + ", ".join(f"{k} {v:.3f}" for k, v in world["clean_error"].items()))

    rows = []
    for variant in args.variants.split(","):
        block = time.perf_counter()
        per_model = {}
        for model in world["models"]:
            wins = 0
            for idx, sample in enumerate(test):
                config = AttackConfig(
                    eta=args.eta, iterations=args.iters, resets=args.resets,
                    epsilon=args.eps, momentum=args.momentum, seed=idx,
                )
                result = ncf_attack(
                    sample.image, sample.label, sample.mask,
                    model, world["library"], config, variant,
                )
                wins += int(result.success[model.name])
            per_model[model.name] = wins / len(test)
        seconds = time.perf_counter() - block
        mean = float(np.mean(list(per_model.values())))
        rows.append({"variant": variant, "mean_success": mean,
                     "per_model": per_model, "seconds": seconds})
        print(f"{variant:13s} mean {100 * mean:5.1f}%  "
              + "  ".join(f"{k} {100 * v:.1f}" for k, v in per_model.items())
              + f"  ({seconds:.0f}s)")

    doc = {
        "protocol": {
            "classes": args.classes,
            "test_images": len(test),
            "model_seeds": args.model_seeds,
            "eta": args.eta, "iterations": args.iters, "resets": args.resets,
            "epsilon": args.eps, "momentum": args.momentum,
        },
        "clean_error": world["clean_error"],
        "results": rows,
    }
    with open(f"{args.out}.json", "w") as fh:
        json.dump(doc, fh, indent=1)
    with open(f"{args.out}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        names = [m.name for m in world["models"]]
        writer.writerow(["variant", "mean_success"] + names + ["seconds"])
        for row in rows:
            writer.writerow(
                [row["variant"], f"{row['mean_success']:.4f}"]
                + [f"{row['per_model'][n]:.4f}" for n in names]
                + [f"{row['seconds']:.1f}"]
            )
    print(f"wrote {args.out}.json and {args.out}.csv")


if __name__ == "__main__":
    main()
