import numpy as np
import pytest

from larslab import engine as E


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("LARSLAB_SEED", raising=False)


@pytest.fixture
def tape():
    with E.Tape() as t:
        yield t


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
