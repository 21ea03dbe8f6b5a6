"""Command line pipeline: synth -> train -> build-lib -> attack -> eval.

Exit codes: 0 success, 2 usage, 3 data errors (corrupt or missing
inputs), 4 model errors (checkpoints, shape or label mismatches).

The attack command is deterministic end to end: per-image seeds derive
from (--seed, position in filename order), worker count never affects
results (ordered reduction), and the report deliberately excludes wall
clock, which goes to a timing.json sidecar instead. NCF_SEED serves as
the fallback seed when --seed is absent.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import distlib, image_io, oracle, synth
from .colorspace import rgb_to_lab

REPORT_NAME = "report.json"
TIMING_NAME = "timing.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _resolve_seed(value):
    if value is not None:
        return int(value)
    return int(os.environ.get("NCF_SEED", "0"))


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _load_dataset(path) -> list[synth.Sample]:
    try:
        return synth.load_dataset(path)
    except FileNotFoundError as exc:
        raise CliError(3, str(exc))
    except (ValueError, KeyError) as exc:
        raise CliError(3, f"bad dataset under {path}: {exc}")


def _load_model(path) -> oracle.ToyClassifier:
    try:
        return oracle.load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(4, f"missing checkpoint {path}")
    except ValueError as exc:
        raise CliError(4, str(exc))


def _predictions(model, images) -> np.ndarray:
    preds = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), 64):
        block = np.stack(images[start : start + 64])
        preds[start : start + len(block)] = oracle.oracle_logits_batch(
            model, block
        ).argmax(axis=1)
    return preds


def cmd_synth(args) -> int:
    seed = _resolve_seed(args.seed)
    if args.per_class < 100:
        raise CliError(2, f"--per-class must be at least 100, got {args.per_class}")
    try:
        samples = synth.generate(args.classes, args.per_class, seed=seed)
    except ValueError as exc:
        raise CliError(2, str(exc))
    synth.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} images ({args.classes} classes) to {args.out}")
    return 0


def cmd_train(args) -> int:
    seed = _resolve_seed(args.seed)
    dataset = _load_dataset(args.data)
    images = np.stack([s.image for s in dataset])
    labels = np.array([s.label for s in dataset])
    try:
        model = oracle.train_toy(images, labels, seed=seed, epochs=args.epochs)
    except oracle.ShapeMismatch as exc:
        raise CliError(4, str(exc))
    oracle.save_checkpoint(model, args.out)
    print(
        f"trained {model.name}: accuracy {model.meta['train_accuracy']:.4f} "
        f"after {model.meta['epochs_run']} epochs -> {args.out}"
    )
    return 0


def cmd_build_lib(args) -> int:
    seed = _resolve_seed(args.seed)
    dataset = _load_dataset(args.corpus)
    corpus = []
    for s in dataset:
        if s.mask.shape != s.image.shape[:2]:
            raise CliError(
                3, f"mask size {s.mask.shape} != image size {s.image.shape[:2]} for {s.name}"
            )
        corpus.append((rgb_to_lab(s.image), s.mask))
    try:
        lib = distlib.build_library(corpus, seed=seed)
    except distlib.EmptyCorpus as exc:
        raise CliError(3, str(exc))
    distlib.save_library(lib, args.out)
    print(f"library with {lib.num_classes} classes -> {args.out}")
    return 0


def _image_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, np.uint64)[0])


def cmd_attack(args) -> int:
    seed = _resolve_seed(args.seed)
    dataset = _load_dataset(args.images)
    masks_dir = Path(args.masks) if args.masks else None
    if masks_dir is not None and masks_dir != Path(args.images):
        for s in dataset:
            cand = [masks_dir / f"{s.name}.pgm", masks_dir / f"{s.name}.png"]
            hit = next((p for p in cand if p.exists()), None)
            if hit is None:
                raise CliError(3, f"no mask for {s.name} under {masks_dir}")
            s.mask = image_io.read_mask(hit)
    for s in dataset:
        if s.mask.shape != s.image.shape[:2]:
            raise CliError(
                3, f"mask size {s.mask.shape} != image size {s.image.shape[:2]} for {s.name}"
            )

    lib = None
    if args.lib.lower() not in ("none", "-"):
        try:
            lib = distlib.load_library(args.lib)
        except FileNotFoundError:
            raise CliError(3, f"missing library {args.lib}")
        except (ValueError, KeyError) as exc:
            raise CliError(3, f"bad library {args.lib}: {exc}")
    model = _load_model(args.model)
    top = max(s.label for s in dataset)
    if top >= model.num_classes:
        raise CliError(
            4, f"label {top} out of range for a {model.num_classes}-class model"
        )

    try:
        config = attack_mod.AttackConfig(
            eta=args.eta,
            iterations=args.iters,
            resets=args.resets,
            epsilon=args.eps,
            alpha=args.alpha,
            momentum=args.momentum,
            seed=seed,
        )
    except ValueError as exc:
        raise CliError(2, str(exc))
    if args.variant not in attack_mod.VARIANTS:
        raise CliError(2, f"unknown variant {args.variant}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    started = time.time()

    def run_one(indexed):
        idx, sample = indexed
        per_image = replace(config, seed=_image_seed(seed, idx))
        try:
            result = attack_mod.ncf_attack(
                sample.image, sample.label, sample.mask, model, lib,
                per_image, variant=args.variant,
            )
        except oracle.ShapeMismatch as exc:
            raise CliError(4, f"{sample.name}: {exc}")
        adv_path = out_dir / f"{sample.name}.png"
        image_io.write_rgb(adv_path, result.adversarial)
        doc = attack_mod.result_to_dict(result, adversarial_path=adv_path.name)
        doc["image"] = sample.name
        return result, doc

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        outcomes = list(pool.map(run_one, enumerate(dataset)))

    labels = np.array([s.label for s in dataset])
    clean_preds = _predictions(model, [s.image for s in dataset])
    clean_error = float((clean_preds != labels).mean())
    success = float(np.mean([o[0].success[model.name] for o in outcomes]))

    effective = {
        "eta": config.eta,
        "iterations": config.iterations,
        "resets": config.resets,
        "epsilon": config.epsilon,
        "alpha": config.effective_alpha,
        "momentum": config.momentum,
        "seed": seed,
        "variant": args.variant,
        "library": None if lib is None else Path(args.lib).name,
        "model": model.name,
    }
    fingerprint = hashlib.sha256(
        json.dumps(effective, sort_keys=True).encode()
    ).hexdigest()

    report = {
        "config": effective,
        "config_fingerprint": fingerprint,
        "n_images": len(dataset),
        "success_rate": {model.name: success},
        "clean_error_rate": {model.name: clean_error},
        "images": [doc for _, doc in outcomes],
    }
    _write_json(out_dir / REPORT_NAME, report)
    _write_json(
        out_dir / TIMING_NAME,
        {
            "wall_clock_seconds": time.time() - started,
            "images_per_second": len(dataset) / max(time.time() - started, 1e-9),
            "jobs": args.jobs,
            "config_fingerprint": fingerprint,
        },
    )
    print(
        f"attacked {len(dataset)} images ({args.variant}): "
        f"success {success:.3f} vs clean error {clean_error:.3f} -> {out_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    labels_path = Path(args.labels)
    if not labels_path.exists():
        raise CliError(3, f"missing labels file {labels_path}")
    import csv

    with open(labels_path, newline="") as fh:
        label_by_name = {Path(r["image"]).stem: int(r["label"]) for r in csv.DictReader(fh)}

    adv_dir = Path(args.adv)
    files = sorted(adv_dir.glob("*.png")) + sorted(adv_dir.glob("*.ppm"))
    if not files:
        raise CliError(3, f"no images under {adv_dir}")
    missing = [f.stem for f in files if f.stem not in label_by_name]
    if missing:
        raise CliError(4, f"no label for {missing[0]} (and {len(missing) - 1} more)")
    images = [image_io.read_rgb(f) for f in files]
    truths = np.array([label_by_name[f.stem] for f in files])

    substitute = Path(args.substitute).stem if args.substitute else None
    models = {}
    for spec_path in args.models.split(","):
        model = _load_model(spec_path.strip())
        preds = _predictions(model, images)
        models[model.name] = {
            "success_rate": float((preds != truths).mean()),
            "white_box": model.name == substitute,
        }

    effective = {
        "adv": str(args.adv),
        "models": str(args.models),
        "labels": str(args.labels),
        "substitute": substitute,
    }
    fingerprint = hashlib.sha256(
        json.dumps(effective, sort_keys=True).encode()
    ).hexdigest()
    report = {
        "config_fingerprint": fingerprint,
        "n_images": len(files),
        "models": models,
    }
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ncf", description="recoloring attack pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic shape dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-lib", help="build the color distribution library")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_lib)

    p = sub.add_parser("attack", help="attack a directory of images")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", default=None)
    p.add_argument("--lib", required=True, help="library json, or 'none' to disable")
    p.add_argument("--model", required=True)
    p.add_argument("--eta", type=int, default=50)
    p.add_argument("--iters", type=int, default=15)
    p.add_argument("--resets", type=int, default=10)
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--momentum", type=float, default=0.6)
    p.add_argument("--variant", default="ncf", choices=attack_mod.VARIANTS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="evaluate adversarial images against models")
    p.add_argument("--adv", required=True)
    p.add_argument("--models", required=True, help="comma separated checkpoints")
    p.add_argument("--labels", required=True)
    p.add_argument("--substitute", default=None, help="checkpoint attacked (white box)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except distlib.EmptyCorpus as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (oracle.ShapeMismatch, oracle.ClassCountMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())
