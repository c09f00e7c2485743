"""Shared fixtures: small synthetic images and one trained 32px model per session."""
import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest

from phasematch import convnet, dataset
from phasematch.imaging import GrayImage

# recipe for the session model; acceptance criterion 6 depends on it
TRAIN_PAIRS = 16
TRAIN_SEED = 11
TRAIN_EPOCHS = 5


def rectangle_image(size=96, box=(30, 26, 66, 62)):
    """Black canvas with one white axis-aligned rectangle; box is (x0, y0, x1, y1) inclusive-exclusive."""
    px = np.zeros((size, size))
    x0, y0, x1, y1 = box
    px[y0:y1, x0:x1] = 1.0
    return GrayImage(px)


def textured_image(seed, size=96):
    pair = dataset.synth_pair(dataset.SynthParams(size=size), seed)
    return pair.img_a


@pytest.fixture(scope="session")
def training_manifest():
    params = dataset.SynthParams(size=128)
    pairs = [dataset.synth_pair(params, 1000 + i) for i in range(TRAIN_PAIRS)]
    return dataset.build_dataset(pairs, 32, 8, (0.7, 0.15, 0.15), TRAIN_SEED, displaced_fraction=0.5)


@pytest.fixture(scope="session")
def trained(training_manifest):
    """(params, history, seconds) for the default 32px 2-channel spec."""
    import time

    t0 = time.perf_counter()
    params, history = convnet.train(training_manifest.subset("train"), training_manifest.subset("val"),
                                    convnet.default_spec(32),
                                    convnet.TrainConfig(epochs=TRAIN_EPOCHS, seed=TRAIN_SEED))
    return params, history, time.perf_counter() - t0


@pytest.fixture(scope="session")
def model_file(trained, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "m32.pmcnn"
    convnet.save_model(trained[0], path)
    return path


def toy_separable(n, size=16, seed=0):
    """Positives: a patch with itself.  Negatives: a patch with its negation."""
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((n, size, size))
    labels = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    other = np.where(labels[:, None, None] > 0, base, -base)
    x = np.stack([base, other], axis=-1)
    return x.astype(np.float32), labels.astype(np.float32)


# acceptance verdicts, one line per criterion, echoed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
