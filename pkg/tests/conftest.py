from dataclasses import replace

import pytest

from tppkit import hawkes


@pytest.fixture(scope="session")
def synthetic_config():
    return hawkes.DEFAULT_SYNTHETIC_CONFIG


@pytest.fixture(scope="session")
def small_hawkes_dataset():
    """400 sequences from the default two-component generator."""
    cfg = replace(hawkes.DEFAULT_SYNTHETIC_CONFIG, n_sequences=400, seed=123)
    return hawkes.generate_dataset(cfg)


@pytest.fixture(scope="session")
def tiny_hawkes_sequences():
    params = hawkes.DEFAULT_SYNTHETIC_CONFIG.params()
    seqs = [hawkes.hawkes_simulate(params, 40.0, seed) for seed in range(12)]
    return [s for s in seqs if len(s) >= 2]
