import numpy as np
import pytest

from tryon_iqa.model import IcaModel, ModelConfig
from tryon_iqa.synthetic import make_corpus


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(image_height=16, image_width=16, patch_size=8, embed_dim=16, num_heads=2,
                       depth=2, mlp_ratio=2)


@pytest.fixture
def tiny_model(tiny_config):
    return IcaModel.init(tiny_config, seed=3)


@pytest.fixture(scope="session")
def small_corpus():
    return make_corpus(n_anchors=12, per_anchor=4, height=16, width=16, seed=5)


@pytest.fixture
def images_for(tiny_config):
    def make(rng, batch=2):
        h, w = tiny_config.image_height, tiny_config.image_width
        return tuple(rng.uniform(0, 1, (batch, h, w, 3)) for _ in range(3))
    return make


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])
