"""Shared fixtures-by-hand for the test suite."""

import numpy as np

from exchtensor.sparse import SparseExchangeableTensor


def random_sparse(dims, channels, n_obs, rng):
    """Random tensor with n_obs distinct observed cells."""
    total = int(np.prod(dims))
    assert n_obs <= total
    picks = rng.choice(total, size=n_obs, replace=False)
    idx = np.stack(np.unravel_index(picks, dims), axis=1)
    return SparseExchangeableTensor(dims, idx, rng.normal(size=(n_obs, channels)))


def random_dense(dims, channels, rng):
    """Fully observed tensor."""
    return random_sparse(dims, channels, int(np.prod(dims)), rng)


def transpose_matrix(t):
    """Swap the two axes of a matrix-shaped tensor."""
    assert t.ndim == 2
    return SparseExchangeableTensor(
        (t.dims[1], t.dims[0]), t.indices[:, ::-1], t.values
    )
