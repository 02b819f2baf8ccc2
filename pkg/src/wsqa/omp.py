"""Greedy sparse decomposition of a binary target over binary atoms with
nonnegative coefficients: orthogonal matching pursuit where each round picks
the atom best positively correlated with the residual and refits the
selected set by nonnegative least squares (negative solutions are clamped
at zero by construction).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls


@dataclass(frozen=True)
class OmpResult:
    coefficients: np.ndarray  # one per atom, >= 0, at most k nonzero
    selected: tuple[int, ...]  # atom indices in pick order
    residual_norms: tuple[float, ...]  # ||target||, then after each pick
    no_signal: bool  # every atom was empty

    def normalized(self) -> np.ndarray:
        """Coefficients rescaled to sum to 1 (zeros stay zeros)."""
        s = self.coefficients.sum()
        if s <= 0:
            return self.coefficients.copy()
        return self.coefficients / s


def relu_omp(target, atoms, k: int = 3) -> OmpResult:
    """Decompose target ≈ Σ α_c · atom_c with α ≥ 0 and at most k nonzeros.

    Correlations are normalized by atom norm so differently sized atoms
    compete fairly; atoms with no positive correlation to the residual are
    never picked, so the residual norm is non-increasing across rounds.
    All-empty atom sets return a zero vector flagged no_signal.
    """
    y = np.asarray(target, dtype=np.float64).ravel()
    if y.size == 0 or not np.any(y):
        raise ValueError("target must be non-empty")
    a = np.asarray(atoms, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[1] != y.size:
        raise ValueError(f"atoms length {a.shape[1]} != target length {y.size}")
    n_atoms = a.shape[0]
    norms = np.sqrt((a * a).sum(axis=1))
    coeffs = np.zeros(n_atoms)
    if not np.any(norms > 0):
        return OmpResult(coeffs, (), (float(np.linalg.norm(y)),), True)

    usable = norms > 0
    residual = y.copy()
    selected: list[int] = []
    norms_trace = [float(np.linalg.norm(y))]
    for _ in range(min(k, int(usable.sum()))):
        corr = np.where(usable, a @ residual / np.where(usable, norms, 1.0), -np.inf)
        corr[selected] = -np.inf
        best = int(np.argmax(corr))
        if corr[best] <= 1e-12:
            break
        selected.append(best)
        sol, _ = nnls(a[selected].T, y)
        residual = y - a[selected].T @ sol
        norms_trace.append(float(np.linalg.norm(residual)))
    if selected:
        sol, _ = nnls(a[selected].T, y)
        coeffs[selected] = sol
    return OmpResult(coeffs, tuple(selected), tuple(norms_trace), False)
