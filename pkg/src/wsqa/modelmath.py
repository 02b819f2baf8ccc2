"""Standalone numeric kernels for the network-specific math: per-channel
attention weighting from globally pooled features, concave-gated multi-head
mask cross-entropies, and the composite loss assembly. Every kernel ships
an analytic gradient that the self-test checks against central finite
differences; no network or training loop lives here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: probability clamp keeping cross-entropy finite
EPS_P = 1e-7


class ModelMathError(ValueError):
    pass


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Channel attention
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EcaParams:
    """1-D conv kernel (odd length) plus bias for the channel gate."""

    kernel: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        object.__setattr__(self, "kernel", k)
        if k.ndim != 1 or k.size < 1 or k.size % 2 == 0:
            raise ModelMathError(f"kernel must be 1-D with odd length, got shape {k.shape}")


def gap(features: np.ndarray) -> np.ndarray:
    """Global average pool: per-channel spatial mean of a (C, H, W) grid."""
    if features.ndim != 3:
        raise ModelMathError(f"features must be (C, H, W), got {features.shape}")
    return features.mean(axis=(1, 2))


def _circular_conv(kernel: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Cross-correlation with circular padding over the channel axis."""
    k = kernel.size
    half = k // 2
    c = g.size
    out = np.zeros(c)
    for u in range(k):
        out += kernel[u] * np.roll(g, half - u)
    return out


def eca_weights(features: np.ndarray, params: EcaParams) -> np.ndarray:
    """Per-channel gate in (0, 1): sigmoid of the circularly padded 1-D
    convolution of the pooled channel means, plus bias."""
    if not np.all(np.isfinite(features)):
        raise ModelMathError("non-finite features")
    g = gap(features)
    return sigmoid(_circular_conv(params.kernel, g) + params.bias)


def eca_weights_with_grad(features: np.ndarray, params: EcaParams):
    """Weights plus analytic Jacobians w.r.t. the kernel and bias.

    Returns (w, dw_dkernel, dw_dbias) with dw_dkernel[c, u] = dw_c/dk_u.
    """
    g = gap(features)
    k = params.kernel.size
    half = k // 2
    z = _circular_conv(params.kernel, g) + params.bias
    w = sigmoid(z)
    sprime = w * (1.0 - w)
    c = g.size
    dk = np.zeros((c, k))
    for u in range(k):
        dk[:, u] = sprime * np.roll(g, half - u)
    return w, dk, sprime.copy()


def apply_channel_attention(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Scale each channel of a (C, H, W) grid by its gate weight."""
    if weights.shape != (features.shape[0],):
        raise ModelMathError("one weight per channel required")
    return features * weights[:, None, None]


# ---------------------------------------------------------------------------
# Mask losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadPrediction:
    """Per-pixel probabilities from the whole / overlap / complement heads
    over one instance window; all three grids share a shape."""

    whole: np.ndarray
    overlap: np.ndarray
    complement: np.ndarray

    def __post_init__(self):
        if not (self.whole.shape == self.overlap.shape == self.complement.shape):
            raise ModelMathError("head grids must share a shape")


@dataclass(frozen=True)
class InstanceTargets:
    """Binary targets for the three heads plus the concavity gate flag."""

    whole: np.ndarray
    overlap: np.ndarray
    complement: np.ndarray
    nonconcave: bool


@dataclass(frozen=True)
class MaskLoss:
    l_w: float
    l_o: float
    l_c: float

    @property
    def total(self) -> float:
        return self.l_w + self.l_o + self.l_c


def binary_cross_entropy(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean pixel-wise cross-entropy with probabilities clamped to
    [EPS_P, 1 - EPS_P]."""
    p = np.clip(np.asarray(pred, dtype=np.float64), EPS_P, 1.0 - EPS_P)
    t = np.asarray(target, dtype=np.float64)
    return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())


def bce_from_logits(logits: np.ndarray, target: np.ndarray):
    """(loss, dloss/dlogits) for the mean binary cross-entropy."""
    p = sigmoid(np.asarray(logits, dtype=np.float64))
    t = np.asarray(target, dtype=np.float64)
    loss = binary_cross_entropy(p, t)
    grad = (p - t) / p.size
    return loss, grad


def mask_loss_nonconcave(
    per_tile: list[list[tuple[HeadPrediction, InstanceTargets]]],
) -> MaskLoss:
    """Concave-gated three-head mask loss.

    Per tile, the mean over non-concave instances of the three per-head
    cross-entropies; then the mean over tiles that kept at least one
    instance. Raises when every instance everywhere is gated out.
    """
    tile_w, tile_o, tile_c = [], [], []
    for instances in per_tile:
        sums = np.zeros(3)
        n = 0
        for pred, tgt in instances:
            if not tgt.nonconcave:
                continue
            sums[0] += binary_cross_entropy(pred.whole, tgt.whole)
            sums[1] += binary_cross_entropy(pred.overlap, tgt.overlap)
            sums[2] += binary_cross_entropy(pred.complement, tgt.complement)
            n += 1
        if n:
            tile_w.append(sums[0] / n)
            tile_o.append(sums[1] / n)
            tile_c.append(sums[2] / n)
    if not tile_w:
        raise ModelMathError("every instance is concave-gated: mask loss undefined")
    return MaskLoss(
        l_w=float(np.mean(tile_w)),
        l_o=float(np.mean(tile_o)),
        l_c=float(np.mean(tile_c)),
    )


# ---------------------------------------------------------------------------
# Box / class kernels and the composite
# ---------------------------------------------------------------------------


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0):
    """Mean smooth-L1 (Huber) loss and its gradient w.r.t. pred."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d)) / d.size
    return float(loss.mean()), grad


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over class logits (rows) with integer labels,
    plus the gradient w.r.t. logits."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(labels).astype(int)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    n = z.shape[0]
    loss = float((logsumexp - z[np.arange(n), labels]).mean())
    probs = np.exp(z - logsumexp[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def composite_loss(
    l_reg: float,
    l_cls: float,
    l_mask: float,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    lambda3: float = 1.0,
) -> float:
    """Weighted sum of the regression, classification, and mask terms."""
    terms = (l_reg, l_cls, l_mask)
    if not all(np.isfinite(t) for t in terms):
        raise ModelMathError(f"non-finite loss inputs {terms}")
    return lambda1 * l_reg + lambda2 * l_cls + lambda3 * l_mask


# ---------------------------------------------------------------------------
# Gradient self-test
# ---------------------------------------------------------------------------


def _central_diff(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.abs(a).max(initial=0)), float(np.abs(b).max(initial=0)), 1e-12)
    return float(np.abs(a - b).max(initial=0) / denom)


def gradient_selftest(n_cases: int = 100, seed: int = 0, tol: float = 1e-4):
    """Check every analytic gradient against central finite differences on
    random inputs. Returns [(kernel name, max relative error, passed)]."""
    rng = np.random.default_rng(seed)
    worst = {"eca/kernel": 0.0, "eca/bias": 0.0, "mask-bce/logits": 0.0,
             "smooth-l1/pred": 0.0, "class-ce/logits": 0.0}

    for _ in range(n_cases):
        c = int(rng.integers(3, 9))
        feats = rng.normal(0.0, 1.0, (c, 4, 4))
        kern = rng.normal(0.0, 1.0, 3)
        bias = float(rng.normal())
        params = EcaParams(kern, bias)
        _, dk, db = eca_weights_with_grad(feats, params)
        for ci in range(c):
            fd_k = _central_diff(lambda: eca_weights(feats, EcaParams(kern, bias))[ci], kern)
            worst["eca/kernel"] = max(worst["eca/kernel"], _rel_err(dk[ci], fd_k))
        barr = np.array([bias])
        fd_b = np.array(
            [_central_diff(lambda: eca_weights(feats, EcaParams(kern, barr[0])).sum(), barr)[0]]
        )
        worst["eca/bias"] = max(worst["eca/bias"], _rel_err(np.array([db.sum()]), fd_b))

        logits = rng.normal(0.0, 2.0, (5, 5))
        target = (rng.random((5, 5)) < 0.5).astype(np.float64)
        _, grad = bce_from_logits(logits, target)
        fd = _central_diff(lambda: bce_from_logits(logits, target)[0], logits)
        worst["mask-bce/logits"] = max(worst["mask-bce/logits"], _rel_err(grad, fd))

        pred = rng.normal(0.0, 2.0, 8)
        tgt = rng.normal(0.0, 2.0, 8)
        _, grad = smooth_l1(pred, tgt)
        fd = _central_diff(lambda: smooth_l1(pred, tgt)[0], pred)
        worst["smooth-l1/pred"] = max(worst["smooth-l1/pred"], _rel_err(grad, fd))

        zl = rng.normal(0.0, 2.0, (4, 6))
        labels = rng.integers(0, 6, 4)
        _, grad = softmax_cross_entropy(zl, labels)
        fd = _central_diff(lambda: softmax_cross_entropy(zl, labels)[0], zl)
        worst["class-ce/logits"] = max(worst["class-ce/logits"], _rel_err(grad, fd))

    return [(name, err, err < tol) for name, err in worst.items()]
