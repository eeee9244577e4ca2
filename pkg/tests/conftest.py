"""Shared fixtures: seeded instance pools and the built-in toy problems."""

from __future__ import annotations

import numpy as np
import pytest

import qdpsens as qs

POOL_BASE_SEED = 20_000


def make_pool(count: int, base_seed: int = POOL_BASE_SEED, square_controls: bool = False,
              n_low: int = 2, n_high: int = 21) -> list:
    """Deterministic pool of random certified-curvature instances."""
    pool = []
    for idx in range(count):
        seed = base_seed + idx
        rng = np.random.default_rng(seed)
        qdp = qs.random_sosc_qdp(
            seed,
            N=int(rng.integers(n_low, n_high)),
            square_controls=square_controls,
        )
        pool.append(qdp)
    return pool


@pytest.fixture(scope="session")
def small_pool():
    return make_pool(8)


@pytest.fixture(scope="session")
def square_pool():
    return make_pool(6, base_seed=31_000, square_controls=True)


@pytest.fixture(scope="session")
def tracking_linear_model():
    return qs.tracking_toy_model(40, 10.0, 1.0, "linear")


@pytest.fixture(scope="session")
def tracking_exp_model():
    return qs.tracking_toy_model(40, 10.0, 1.0, "exp")


@pytest.fixture(scope="session")
def tracking_linear_qdp(tracking_linear_model):
    return qs.assemble_qdp_from_nldp(tracking_linear_model)


@pytest.fixture(scope="session")
def tracking_exp_qdp(tracking_exp_model):
    return qs.assemble_qdp_from_nldp(tracking_exp_model)


def random_direction(qdp, rng, kind: str = "any"):
    """Random direction: a canonical block direction or a dense unit vector."""
    dims = qdp.dims
    if kind == "initial":
        return qs.unit_direction(dims, -1, int(rng.integers(1, dims.nx + 1)))
    if kind == "stage":
        i = int(rng.integers(0, dims.N))
        return qs.unit_direction(dims, i, int(rng.integers(1, dims.nd + 1)))
    vec = rng.standard_normal(dims.n_dir)
    vec /= np.linalg.norm(vec)
    return qs.PerturbationDirection.from_dense(dims, vec)
