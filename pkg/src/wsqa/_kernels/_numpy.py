"""Pure-numpy implementations of the hot kernels.

Used directly when numba is unavailable or disabled via WSQA_NO_NUMBA=1.
The jitted twins in ``_numba.py`` must return identical results for the
rle/intersect kernels and agree within float tolerance for the gmm ones
(summation order differs); the backend tests enforce this.
"""

import numpy as np

BACKEND = "numpy"


def rle_encode(flat):
    """Run lengths of a flat uint8 grid, alternating background/foreground.

    The first count is always background (0 prepended when the grid starts
    with foreground).
    """
    n = flat.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [n]))
    counts = np.diff(edges).astype(np.int64)
    if flat[0] != 0:
        counts = np.concatenate(([np.int64(0)], counts))
    return counts


def rle_decode(counts, n):
    """Inverse of rle_encode: flat uint8 grid of length n."""
    values = (np.arange(counts.size, dtype=np.int64) & 1).astype(np.uint8)
    out = np.repeat(values, counts)
    if out.size != n:
        raise ValueError(f"rle counts sum to {out.size}, expected {n}")
    return out


def intersect_count(a, b):
    """Number of positions where both uint8 grids are foreground."""
    return int(np.count_nonzero(np.logical_and(a, b)))


def gmm_em_step(x, weights, means, variances):
    """One EM iteration for a 1-D Gaussian mixture.

    Returns updated (weights, means, variances, log_likelihood) where the
    log-likelihood is evaluated at the *input* parameters.
    """
    k = means.size
    log_prob = (
        np.log(weights)[None, :]
        - 0.5 * np.log(2.0 * np.pi * variances)[None, :]
        - 0.5 * (x[:, None] - means[None, :]) ** 2 / variances[None, :]
    )
    top = log_prob.max(axis=1)
    log_norm = top + np.log(np.exp(log_prob - top[:, None]).sum(axis=1))
    loglik = float(log_norm.sum())
    resp = np.exp(log_prob - log_norm[:, None])

    nk = resp.sum(axis=0)
    new_w = nk / x.size
    new_mu = (resp * x[:, None]).sum(axis=0) / nk
    new_var = np.empty(k)
    for j in range(k):
        new_var[j] = float(np.dot(resp[:, j], (x - new_mu[j]) ** 2) / nk[j])
    return new_w, new_mu, new_var, loglik


def gmm_log_likelihood(x, weights, means, variances):
    """Total log-likelihood of samples under a 1-D Gaussian mixture."""
    log_prob = (
        np.log(weights)[None, :]
        - 0.5 * np.log(2.0 * np.pi * variances)[None, :]
        - 0.5 * (x[:, None] - means[None, :]) ** 2 / variances[None, :]
    )
    top = log_prob.max(axis=1)
    return float((top + np.log(np.exp(log_prob - top[:, None]).sum(axis=1))).sum())
