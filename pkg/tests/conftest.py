import numpy as np
import pytest

from mrnn import corpus
from mrnn.model import MRnnConfig, Variant, init_parameters

ALL_VARIANTS = [v.value for v in Variant]


def small_config(variant=Variant.FULL, vocab_size=9, dim_image=5, **kw):
    dims = dict(dim_embed1=4, dim_embed2=6, dim_recurrent=6, dim_multimodal=8)
    dims.update(kw)
    return MRnnConfig(vocab_size=vocab_size, dim_image=dim_image, variant=Variant(variant), **dims)


def random_model(variant=Variant.FULL, seed=0, scale=0.5, **kw):
    config = small_config(variant, **kw)
    params = init_parameters(config, seed, scale=scale)
    rng = np.random.default_rng(seed + 1000)
    for name in params:
        if name.startswith("b"):
            params[name] = rng.uniform(-0.2, 0.2, size=params[name].shape)
    image = rng.normal(size=config.dim_image)
    return config, params, image


@pytest.fixture
def tiny_synthetic():
    """12 images (3 test), 3 captions each."""
    return corpus.synthetic_images(12, seed=3, captions_per_image=3, n_test=3)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
