#!/usr/bin/env python3
"""Cross-model transfer matrix.

Crafts adversarial images against each substitute model (and, with
--ensemble, against the logit average of all of them), then evaluates
every batch against every model. Writes PREFIX.json and PREFIX.csv.
"""

import argparse
import csv
import json

import numpy as np

from common import add_world_args, build_world
from ncf.attack import AttackConfig, ncf_attack
from ncf.oracle import EnsembleOracle, oracle_logits_batch


def craft(world, oracle, args):
    advs = []
    for idx, sample in enumerate(world["test"]):
        config = AttackConfig(
            eta=args.eta, iterations=args.iters, resets=args.resets,
            epsilon=args.eps, momentum=args.momentum, seed=idx,
        )
        result = ncf_attack(
            sample.image, sample.label, sample.mask,
            oracle, world["library"], config, "ncf",
        )
        advs.append(result.adversarial)
    return np.stack(advs)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    add_world_args(parser)
    parser.add_argument("--eta", type=int, default=50)
    parser.add_argument("--iters", type=int, default=15)
    parser.add_argument("--resets", type=int, default=10)
    parser.add_argument("--eps", type=float, default=0.2)
    parser.add_argument("--momentum", type=float, default=0.6)
    parser.add_argument("--ensemble", action="store_true",
                        help="also craft against the logit average of all models")
    parser.add_argument("--out", default="transfer")
    args = parser.parse_args()

    world = build_world(args)
    labels = world["test_labels"]
    models = world["models"]
    print(f"setup {world['setup_seconds']:.0f}s, clean error "
          + ", ".join(f"{k} {v:.3f}" for k, v in world["clean_error"].items()))

    substitutes = [(m.name, m) for m in models]
    if args.ensemble:
        substitutes.append(
            ("ensemble", EnsembleOracle(models, name="ensemble"))
        )

    matrix = {}
    for sub_name, oracle in substitutes:
        advs = craft(world, oracle, args)
        row = {}
        for target in models:
            preds = oracle_logits_batch(target, advs).argmax(axis=1)
            row[target.name] = float((preds != labels).mean())
        matrix[sub_name] = row
        print(f"{sub_name:10s} " + "  ".join(
            f"->{k} {100 * v:5.1f}%" for k, v in row.items()))

    doc = {
        "clean_error": world["clean_error"],
        "transfer": matrix,
        "note": "rows: substitute the attack saw; columns: evaluated model",
    }
    with open(f"{args.out}.json", "w") as fh:
        json.dump(doc, fh, indent=1)
    with open(f"{args.out}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        names = [m.name for m in models]
        writer.writerow(["substitute"] + names)
        for sub_name, row in matrix.items():
            writer.writerow([sub_name] + [f"{row[n]:.4f}" for n in names])
    print(f"wrote {args.out}.json and {args.out}.csv")


if __name__ == "__main__":
    main()
