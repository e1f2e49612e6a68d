"""Shared fixtures: small synthetic corpora and quick-fit models.

Heavy artifacts (full-size corpus, GMM100) live in test_acceptance.py;
everything here is sized for sub-second unit tests.
"""

import numpy as np
import pytest

from warpcost import gmm, models, patches, synthetic


@pytest.fixture(scope="session")
def small_corpus():
    """~9k warp-error patches from 40 layered 128x128 scenes."""
    pairs = synthetic.training_pairs(40, 128, 128, seed=0)
    return patches.build_dataset(pairs, 8, 8, seed=0, split_tag="train")


@pytest.fixture(scope="session")
def tiny_patches():
    """2x2 warp-error patches (dim 4) for quadrature-scale checks."""
    pairs = synthetic.training_pairs(30, 96, 96, seed=5)
    return patches.build_dataset(pairs, 2, 4, seed=5, split_tag="train")


@pytest.fixture(scope="session")
def bcl2_model(small_corpus):
    return models.fit("BCL2", small_corpus)


@pytest.fixture(scope="session")
def gmm5_model(small_corpus):
    model, _ = gmm.gmm_fit(small_corpus, 5,
                           gmm.GmmConfig(minibatch_size=20000, epochs=4,
                                         seed=0))
    return model
