import pytest

from styletune import synthdata as sd
from styletune import tokenizer as tk


@pytest.fixture(scope="session")
def catalog():
    return sd.generate_catalog()


@pytest.fixture(scope="session")
def oracles(catalog):
    return sd.train_oracles(catalog, seed=0)


@pytest.fixture(scope="session")
def codebook(catalog):
    return tk.fit_codebook([e.image for e in catalog], K=128, patch_size=4, seed=0)
