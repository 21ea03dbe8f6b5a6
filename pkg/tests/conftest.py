"""Shared fixtures: one small trained pipeline reused across test modules.

Everything here is session-scoped because training the toy model and
building a library are the slow parts (tens of seconds together); the
tests that need heavier protocols build their own material.
"""

import numpy as np
import pytest

from ncf import distlib, oracle, synth
from ncf.colorspace import rgb_to_lab


@pytest.fixture(scope="session")
def small_dataset():
    # 3 classes x 100 keeps train_toy inside its documented regime
    return synth.generate(3, 100, seed=11)


@pytest.fixture(scope="session")
def toy_model(small_dataset):
    images = np.stack([s.image for s in small_dataset])
    labels = np.array([s.label for s in small_dataset])
    return oracle.train_toy(images, labels, seed=5)


@pytest.fixture(scope="session")
def color_library(small_dataset):
    corpus = [(rgb_to_lab(s.image), s.mask) for s in small_dataset]
    return distlib.build_library(corpus, seed=3)


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory, small_dataset, toy_model, color_library):
    """On-disk material for CLI tests.

    data/ holds a 6-image subset (2 per class) in the dataset layout;
    model.ckpt and lib.json come from the session fixtures.
    """
    root = tmp_path_factory.mktemp("cli")
    subset = [small_dataset[i] for i in (0, 1, 100, 101, 200, 201)]
    data = root / "data"
    synth.write_dataset(subset, data)
    model_path = root / "model.ckpt"
    oracle.save_checkpoint(toy_model, model_path)
    lib_path = root / "lib.json"
    distlib.save_library(color_library, lib_path)
    return {
        "root": root,
        "data": data,
        "model": model_path,
        "lib": lib_path,
        "samples": subset,
        # commands name a model by its checkpoint stem
        "model_name": model_path.stem,
    }
