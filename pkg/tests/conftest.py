"""Shared helpers for the test suite."""

import numpy as np
import pytest

from scmbench import (
    BlockParams,
    Dims,
    Rng,
    build_toy_model,
    default_trajectory,
    synth_priors,
)


def make_block(c: int, n_heads: int, seed: int) -> BlockParams:
    rng = Rng(seed)
    scale = 1.0 / np.sqrt(c)
    u = lambda shape: (rng.uniform(shape) * 2.0 - 1.0) * scale
    return BlockParams(wq=u((c, c)), wk=u((c, c)), wv=u((c, c)),
                       wo=u((c, c)), w1=u((c, 2 * c)), w2=u((2 * c, c)),
                       n_heads=n_heads)


def make_setup(f, v, h, w, c, n_heads=2, layers=1, seed=0):
    """Model, priors, and a seeded latent at the given dims."""
    dims = Dims(f, v, h, w, c, n_heads)
    model = build_toy_model(dims, layers, seed)
    priors = synth_priors(dims, default_trajectory(v), Rng(seed + 1))
    z = Rng(seed + 2).normal(dims.latent_shape)
    return dims, model, priors, z


@pytest.fixture
def small_setup():
    return make_setup(2, 2, 4, 4, 8)
