import numpy as np
import pytest

from bevlab.config import ExperimentConfig
from bevlab.world import generate_dataset


def tiny_config(seed=0, grid=32, sequences=3, **data_kw):
    """A small but full-featured experiment config for integration tests."""
    cfg = ExperimentConfig(seed=seed)
    cfg.data.n_sequences = sequences
    cfg.data.seq_len = 3
    cfg.data.grid_size = grid
    cfg.data.extent = 0.8 * grid
    cfg.data.test_sequences = 2
    for k, v in data_kw.items():
        setattr(cfg.data, k, v)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def small_world():
    """One shared tiny dataset + pipeline for detector-level tests."""
    cfg = tiny_config(seed=11, misalign_cells=1.5, misalign_deg=2.0, distortion_amp=0.4)
    ds = generate_dataset(cfg.dataset_spec())
    pipe = cfg.pipeline()
    params = pipe.init_params(0)
    return cfg, ds, pipe, params


def rng_seeds(n, base=1234):
    return [base + 17 * k for k in range(n)]


def randomize_params(params, rng, scale=0.25):
    """Move every parameter to a generic point (off relu/abs kinks).

    Finite-difference checks are only meaningful where the loss is locally
    smooth; zero-initialized biases against sparse inputs would otherwise
    park many pre-activations exactly on a kink.
    """
    for _, p in params.items():
        p.data = p.data + rng.normal(0.0, scale, size=p.data.shape)


def assert_finite(arr):
    assert np.isfinite(arr).all()
