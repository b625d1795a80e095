import hypothesis
import numpy as np
import pytest

from fewvlm.config import SynthConfig
from fewvlm.data import RegionFeatures, Vocab
from fewvlm.utils.logging import logger

np.seterr(all="warn")
logger.setLevel("DEBUG")

hypothesis.settings.register_profile("default", max_examples=100, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=1000, deadline=None)
hypothesis.settings.load_profile("default")


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run the long directional experiments"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long running experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ----------------------------------------------------------------------------
#                      Shared fixtures
# ----------------------------------------------------------------------------
WORDS = "a red blue green circle square triangle star what color is the shape how many objects".split()


@pytest.fixture
def vocab() -> Vocab:
    return Vocab.build([" ".join(WORDS), "question : answer ? next to one two three"])


@pytest.fixture
def tiny_synth() -> SynthConfig:
    """A world small enough to generate in well under a second"""
    return SynthConfig(
        feature_dim=16,
        n_regions=4,
        grid_size=3,
        n_pretrain=40,
        n_vqa_pool=40,
        n_vqa_test=10,
        n_caption_pool=10,
        n_caption_test=10,
        n_episodes=2,
        n_query=1,
    )


def random_regions(rng: np.random.Generator, n: int = 3, dim: int = 16) -> RegionFeatures:
    lo = rng.uniform(0, 0.5, size=(n, 2))
    hi = lo + rng.uniform(0, 0.5, size=(n, 2))
    return RegionFeatures(rng.normal(size=(n, dim)), np.concatenate([lo, hi], axis=1))


@pytest.fixture
def make_regions():
    return random_regions
