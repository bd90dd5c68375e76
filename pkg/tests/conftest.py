import numpy as np
import pytest
import torch

from dajat.data_augment import ImageBatch, synth_dataset
from dajat.dualbn_model import ModelSpec, build_model

torch.set_num_threads(1)

# verdict lines recorded by the acceptance tests; emitted after the run so
# they reach the terminal even under captured output
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_model(bn_variant: str = "split_both", channels=(4, 8), num_classes: int = 4,
               seed: int = 0):
    spec = ModelSpec(conv_channels=tuple(channels), num_classes=num_classes,
                     bn_variant=bn_variant)
    return build_model(spec, seed)


def tiny_batch(n: int = 16, num_classes: int = 4, seed: int = 0,
               size: int = 8) -> ImageBatch:
    rng = np.random.default_rng(seed)
    pixels = rng.random((n, size, size, 3)).astype(np.float32)
    labels = (np.arange(n) % num_classes).astype(np.int64)
    return ImageBatch(pixels=pixels, labels=labels)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def disk_data():
    return synth_dataset(64, 4, seed=0, size=16)
