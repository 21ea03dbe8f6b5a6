"""Shared setup for the experiment runners: dataset, models, library."""

import time

import numpy as np

from ncf import synth
from ncf.colorspace import rgb_to_lab
from ncf.distlib import build_library
from ncf.oracle import oracle_logits_batch, train_toy


def add_world_args(parser):
    parser.add_argument("--classes", type=int, default=5)
    parser.add_argument("--train-per-class", type=int, default=100)
    parser.add_argument("--test-per-class", type=int, default=40)
    parser.add_argument("--data-seed", type=int, default=0)
    parser.add_argument("--test-seed", type=int, default=99)
    parser.add_argument("--model-seeds", default="1,2,3")
    parser.add_argument("--lib-seed", type=int, default=0)
    parser.add_argument("--palette-size", type=int, default=20)


def build_world(args):
    """Generate train/test splits, train one model per seed, build the
    distribution library from the training split."""
    started = time.perf_counter()
    train = synth.generate(args.classes, args.train_per_class, seed=args.data_seed)
    test = synth.generate(args.classes, args.test_per_class, seed=args.test_seed)
    images = np.stack([s.image for s in train])
    labels = np.array([s.label for s in train])
    seeds = [int(s) for s in args.model_seeds.split(",")]
    models = [train_toy(images, labels, seed=s, name=f"toy-s{s}") for s in seeds]
    library = build_library(
        [(rgb_to_lab(s.image), s.mask) for s in train],
        seed=args.lib_seed,
        palette_size=args.palette_size,
    )

    test_images = np.stack([s.image for s in test])
    test_labels = np.array([s.label for s in test])
    clean_error = {}
    for model in models:
        preds = oracle_logits_batch(model, test_images).argmax(axis=1)
        clean_error[model.name] = float((preds != test_labels).mean())

    return {
        "train": train,
        "test": test,
        "models": models,
        "library": library,
        "test_labels": test_labels,
        "clean_error": clean_error,
        "setup_seconds": time.perf_counter() - started,
    }
