import numpy as np
import pytest
import torch

from dualprint.data import FingerprintImage, Minutia, SynthParams, synth_generate
from dualprint.nets import DualHeadConfig, build_model

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth_pair():
    """One live fingerprint with its minutiae, reused across read-only tests."""
    params = SynthParams(identity_seed=11, impression_seed=1, n_minutiae=8)
    return synth_generate(params)


@pytest.fixture(scope="session")
def tiny_model():
    return build_model("tiny", DualHeadConfig(split_point=0), seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_image(rng, size=64):
    pixels = rng.integers(0, 256, size=(size, size), dtype=np.uint8)
    return FingerprintImage(pixels=pixels, finger_id=1, impression_id=1,
                            liveness="live")


def make_minutia(x, y, theta=0.0, quality=1.0):
    return Minutia(x=float(x), y=float(y), theta=float(theta),
                   quality=float(quality))
