"""Seeded 1-D Gaussian mixture fitting by EM, plus the foreground-threshold
rules built on it (two-component nuclear foreground, three-component marker
foreground).

The EM iteration itself lives in the kernel backends; this module owns
initialization, convergence, and threshold extraction. The per-iteration
log-likelihood trace is kept on the model so monotonicity can be asserted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels


class GmmError(ValueError):
    """Degenerate input or failed fit."""


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    converged: bool
    n_iter: int
    log_likelihoods: tuple[float, ...]

    def __post_init__(self):
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise GmmError(f"weights sum to {self.weights.sum()}, expected 1")
        if np.any(self.variances <= 0):
            raise GmmError("non-positive variance")

    @property
    def n_components(self) -> int:
        return self.means.size

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        """Posterior component probabilities for each sample, shape (n, k)."""
        log_prob = (
            np.log(self.weights)[None, :]
            - 0.5 * np.log(2.0 * np.pi * self.variances)[None, :]
            - 0.5 * (x[:, None] - self.means[None, :]) ** 2 / self.variances[None, :]
        )
        log_prob -= log_prob.max(axis=1, keepdims=True)
        p = np.exp(log_prob)
        p /= p.sum(axis=1, keepdims=True)
        return p

    def assign(self, x: np.ndarray) -> np.ndarray:
        """Hard posterior assignment of each sample to a component index."""
        return np.argmax(self.responsibilities(x), axis=1)


def _initial_params(x: np.ndarray, k: int, rng: np.random.Generator):
    # quantile-spread means, uniform weights, pooled variance
    qs = (np.arange(k) + 0.5) / k
    means = np.quantile(x, qs)
    if np.unique(means).size < k:
        # heavily discrete data: jitter collided quantiles apart
        spread = max(float(x.std()), 1e-6)
        means = means + rng.normal(0.0, 1e-3 * spread, size=k)
        means.sort()
    pooled = float(x.var())
    variances = np.full(k, max(pooled, 1e-12))
    weights = np.full(k, 1.0 / k)
    return weights, means.astype(np.float64), variances


def gmm_fit_1d(
    samples,
    n_components: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> GmmModel:
    """Fit a 1-D Gaussian mixture by EM.

    Deterministic given the seed; components are sorted by mean in the
    returned model. The log-likelihood trace is non-decreasing (one entry
    per iteration, evaluated before that iteration's M-step). Convergence:
    per-sample log-likelihood improvement below tol.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 10 * n_components:
        raise GmmError(f"need >= {10 * n_components} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise GmmError("non-finite samples")
    if n_components < 1:
        raise GmmError("n_components must be >= 1")
    if np.unique(x).size == 1 and n_components > 1:
        raise GmmError("all samples identical: mixture is degenerate")

    rng = np.random.default_rng(seed)
    weights, means, variances = _initial_params(x, n_components, rng)
    var_floor = max(1e-10 * float(x.var()), 1e-300)

    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        weights, means, variances, loglik = _kernels.gmm_em_step(
            x, weights, means, variances
        )
        variances = np.maximum(variances, var_floor)
        trace.append(float(loglik))
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < tol * x.size:
            converged = True
            break

    order = np.argsort(means, kind="stable")
    return GmmModel(
        weights=weights[order],
        means=means[order],
        variances=variances[order],
        converged=converged,
        n_iter=it,
        log_likelihoods=tuple(trace),
    )


def two_component_threshold(model: GmmModel) -> float:
    """Scalar decision boundary of a sorted 2-component model: the intensity
    between the two means where the weighted component densities are equal.

    Falls back to the midpoint of the means when the crossing has no root in
    that interval.
    """
    if model.n_components != 2:
        raise GmmError("threshold needs exactly two components")
    (w1, w2) = model.weights
    (m1, m2) = model.means
    (v1, v2) = model.variances
    mid = 0.5 * (m1 + m2)
    # log w1 N(x;m1,v1) = log w2 N(x;m2,v2)  ->  a x^2 + b x + c = 0
    a = 0.5 * (1.0 / v2 - 1.0 / v1)
    b = m1 / v1 - m2 / v2
    c = (
        0.5 * (m2**2 / v2 - m1**2 / v1)
        + math.log(w1 / w2)
        + 0.5 * math.log(v2 / v1)
    )
    if abs(a) < 1e-300:
        if abs(b) < 1e-300:
            return float(mid)
        root = -c / b
        return float(root) if min(m1, m2) <= root <= max(m1, m2) else float(mid)
    disc = b * b - 4 * a * c
    if disc < 0:
        return float(mid)
    roots = [(-b - math.sqrt(disc)) / (2 * a), (-b + math.sqrt(disc)) / (2 * a)]
    inside = [r for r in roots if min(m1, m2) <= r <= max(m1, m2)]
    return float(inside[0]) if inside else float(mid)


def subsample(x: np.ndarray, limit: int, seed: int) -> np.ndarray:
    """Seeded without-replacement subsample used to bound EM cost on large
    pixel populations. Returns x itself when already within the limit."""
    x = np.asarray(x).ravel()
    if x.size <= limit:
        return x
    rng = np.random.default_rng(seed)
    idx = rng.choice(x.size, size=limit, replace=False)
    idx.sort()
    return x[idx]
