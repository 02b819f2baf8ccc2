"""Numba-jitted twins of the kernels in ``_numpy.py``.

Import fails cleanly when numba is missing; the dispatcher in __init__
falls back to the numpy backend. rle/intersect kernels must match the
numpy versions exactly; the gmm kernels may differ only in summation
order (tests allow float tolerance there).
"""

import numpy as np
from numba import njit

BACKEND = "numba"

_JIT = {"cache": True, "nogil": True}


@njit(**_JIT)
def rle_encode(flat):
    n = flat.size
    counts = np.zeros(n + 2, dtype=np.int64)
    idx = 0
    if n == 0:
        return counts[:0]
    if flat[0] != 0:
        idx = 1  # leading zero-length background run
    run = 1
    for i in range(1, n):
        if flat[i] == flat[i - 1]:
            run += 1
        else:
            counts[idx] = run
            idx += 1
            run = 1
    counts[idx] = run
    return counts[: idx + 1].copy()


@njit(**_JIT)
def rle_decode(counts, n):
    out = np.zeros(n, dtype=np.uint8)
    pos = 0
    for i in range(counts.size):
        c = counts[i]
        if i & 1:
            for j in range(pos, pos + c):
                out[j] = 1
        pos += c
    if pos != n:
        raise ValueError("rle counts do not sum to grid size")
    return out


@njit(**_JIT)
def intersect_count(a, b):
    total = 0
    af = a.ravel()
    bf = b.ravel()
    for i in range(af.size):
        if af[i] != 0 and bf[i] != 0:
            total += 1
    return total


@njit(**_JIT)
def gmm_em_step(x, weights, means, variances):
    n = x.size
    k = means.size
    log_w = np.log(weights)
    log_norm_const = -0.5 * np.log(2.0 * np.pi * variances)

    nk = np.zeros(k)
    sx = np.zeros(k)
    loglik = 0.0
    resp = np.empty((n, k))
    for i in range(n):
        top = -1e308
        for j in range(k):
            d = x[i] - means[j]
            lp = log_w[j] + log_norm_const[j] - 0.5 * d * d / variances[j]
            resp[i, j] = lp
            if lp > top:
                top = lp
        s = 0.0
        for j in range(k):
            s += np.exp(resp[i, j] - top)
        ln = top + np.log(s)
        loglik += ln
        for j in range(k):
            r = np.exp(resp[i, j] - ln)
            resp[i, j] = r
            nk[j] += r
            sx[j] += r * x[i]

    new_w = nk / n
    new_mu = sx / nk
    new_var = np.zeros(k)
    for i in range(n):
        for j in range(k):
            d = x[i] - new_mu[j]
            new_var[j] += resp[i, j] * d * d
    for j in range(k):
        new_var[j] /= nk[j]
    return new_w, new_mu, new_var, loglik


@njit(**_JIT)
def gmm_log_likelihood(x, weights, means, variances):
    k = means.size
    log_w = np.log(weights)
    log_norm_const = -0.5 * np.log(2.0 * np.pi * variances)
    total = 0.0
    for i in range(x.size):
        top = -1e308
        lps = np.empty(k)
        for j in range(k):
            d = x[i] - means[j]
            lp = log_w[j] + log_norm_const[j] - 0.5 * d * d / variances[j]
            lps[j] = lp
            if lp > top:
                top = lp
        s = 0.0
        for j in range(k):
            s += np.exp(lps[j] - top)
        total += top + np.log(s)
    return total
