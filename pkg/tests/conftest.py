import numpy as np
import pytest

from slahan.corpus import FeatureSet, Sentence, SyntheticContextual, SyntheticStaticTable
from slahan.model import ModelConfig, SlahanModel
from slahan.numerics import kernels


def tiny_features(static_dim=3, layers=2, dim=3, seed=0):
    return FeatureSet(
        static=SyntheticStaticTable(static_dim, seed=seed) if static_dim else None,
        contextual=(SyntheticContextual("ctx", layers, dim, seed=seed),) if layers else (),
    )


def tiny_model(variant="slahan", hidden=4, orders=(1, 2), seed=0, dropout=0.0, lam=None,
               depth=1, static_dim=3, layers=2, dim=3):
    if lam is None:
        lam = 0.0 if variant == "base" else 1.0
    cfg = ModelConfig(
        variant=variant,
        orders=orders,
        hidden_dim=hidden,
        lstm_depth=depth,
        dropout=dropout,
        syntax_lambda=lam,
        static_dim=static_dim,
        contextual=(("ctx", layers, dim),) if layers else (),
    )
    return SlahanModel(cfg, seed=seed)


@pytest.fixture
def sentence4():
    # a ( b ) with "a" under the root
    return Sentence.from_words(["a", "(", "b", ")"], [0, 1, 2, 2], ["KEEP", "DELETE", "DELETE", "DELETE"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["python", "compiled"])
def backend(request):
    if request.param == "compiled" and not kernels.compiled_available():
        pytest.skip("compiled extension not built")
    previous = kernels.BACKEND
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)
