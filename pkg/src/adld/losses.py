"""Training objectives: landmark classification, the least-squares landmark
adversarial pair, weighted AU detection, feature adversarial terms,
reconstruction and cross-cycle consistency, and the weighted total.

All losses are batch means.  Reductions run in float64 and are stored back as
float32 scalars, so the batched implementations agree with plain scalar-loop
references to well below 1e-6.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_FLOOR = 1e-12


class ConfigurationError(ValueError):
    """Invalid loss configuration (rates, weights, labels)."""


class DivergenceError(RuntimeError):
    """A loss term became non-finite during training."""


@dataclass(frozen=True)
class LossWeights:
    lambda_l: float = 0.6
    lambda_ad_l: float = 400.0
    lambda_ad_f: float = 1.2
    lambda_r: float = 3.0
    lambda_cc: float = 40.0

    def __post_init__(self):
        for name in ("lambda_l", "lambda_ad_l", "lambda_ad_f", "lambda_r", "lambda_cc"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")


@dataclass(frozen=True)
class AUWeightTable:
    """Per-AU occurrence rates and normalized inverse-rate weights."""

    rates: tuple
    weights: tuple

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


def compute_au_weights(rates) -> AUWeightTable:
    """w_j proportional to 1/r_j, normalized to sum to one."""
    arr = np.asarray(rates, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ConfigurationError(f"rates must be a non-empty vector, got shape {arr.shape}")
    if (arr <= 0).any() or (arr > 1).any():
        raise ConfigurationError(f"occurrence rates must lie in (0, 1], got {arr.tolist()}")
    inv = 1.0 / arr
    w = inv / inv.sum()
    return AUWeightTable(tuple(arr.tolist()), tuple(w.tolist()))


def _check_labels(labels: np.ndarray, n: int, d: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.ndim != 2 or lab.shape[1] != n:
        raise ValueError(f"labels must be (batch, {n}), got {lab.shape}")
    if (lab < 1).any() or (lab > d * d).any():
        bad = lab[(lab < 1) | (lab > d * d)][0]
        raise ValueError(f"landmark class {bad} outside [1, {d * d}]")
    return lab


def landmark_cls_loss(maps: Tensor, labels) -> Tensor:
    """Mean over landmarks of -log softmax probability at the labelled cell."""
    b, n, d, _ = maps.shape
    lab = _check_labels(labels, n, d) - 1
    x = maps.data.astype(np.float64)
    m = x.max(axis=(2, 3), keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=(2, 3), keepdims=True)
    flat = p.reshape(b, n, d * d)
    bi = np.arange(b)[:, None]
    ni = np.arange(n)[None, :]
    pt = flat[bi, ni, lab]
    loss = -np.log(np.maximum(pt, LOG_FLOOR)).mean()

    def bwd(dout, needs):
        g = p.copy()
        gflat = g.reshape(b, n, d * d)
        gflat[bi, ni, lab] -= 1.0
        g *= float(dout) / (b * n)
        return (g.astype(np.float32),)

    return T.apply_op(np.float32(loss), (maps,), bwd)


def landmark_adv_d_loss(maps: Tensor, labels) -> Tensor:
    """Least-squares discriminator target: 1 at the labelled cell, 0 elsewhere.

    Operates on raw (pre-softmax) response maps.
    """
    b, n, d, _ = maps.shape
    lab = _check_labels(labels, n, d) - 1
    x = maps.data.astype(np.float64)
    flat = x.reshape(b, n, d * d)
    bi = np.arange(b)[:, None]
    ni = np.arange(n)[None, :]
    xt = flat[bi, ni, lab]
    total = (x * x).sum() + (1.0 - 2.0 * xt).sum()
    loss = total / (b * n * d * d)

    def bwd(dout, needs):
        g = 2.0 * x
        gflat = g.reshape(b, n, d * d)
        gflat[bi, ni, lab] -= 2.0
        g *= float(dout) / (b * n * d * d)
        return (g.astype(np.float32),)

    return T.apply_op(np.float32(loss), (maps,), bwd)


def landmark_adv_e_loss(maps: Tensor) -> Tensor:
    """Least-squares encoder target: the uniform response 1/d^2 everywhere.

    Operates on raw (pre-softmax) response maps; label-free.
    """
    b, n, d, _ = maps.shape
    u = 1.0 / (d * d)
    x = maps.data.astype(np.float64)
    diff = x - u
    loss = (diff * diff).sum() / (b * n * d * d)

    def bwd(dout, needs):
        g = diff * (2.0 * float(dout) / (b * n * d * d))
        return (g.astype(np.float32),)

    return T.apply_op(np.float32(loss), (maps,), bwd)


def au_detection_loss(logits: Tensor, labels, weights: AUWeightTable | np.ndarray) -> Tensor:
    """Occurrence-weighted binary cross entropy from logits, batch-meaned."""
    b, m = logits.shape
    lab = np.asarray(labels, dtype=np.float64)
    if lab.shape != (b, m):
        raise ValueError(f"labels must be ({b}, {m}), got {lab.shape}")
    if not np.isin(lab, (0.0, 1.0)).all():
        bad = lab[~np.isin(lab, (0.0, 1.0))][0]
        raise ValueError(f"AU label {bad} not in {{0, 1}}")
    w = weights.weight_array if isinstance(weights, AUWeightTable) else np.asarray(weights, dtype=np.float64)
    if w.shape != (m,):
        raise ConfigurationError(f"weights must have shape ({m},), got {w.shape}")
    s = logits.data.astype(np.float64)
    # stable -[p log sigmoid(s) + (1-p) log(1 - sigmoid(s))]
    bce = np.maximum(s, 0.0) - s * lab + np.log1p(np.exp(-np.abs(s)))
    loss = (bce * w[None, :]).sum() / b

    def bwd(dout, needs):
        sig = 1.0 / (1.0 + np.exp(-s))
        g = (sig - lab) * w[None, :] * (float(dout) / b)
        return (g.astype(np.float32),)

    return T.apply_op(np.float32(loss), (logits,), bwd)


def feature_adv_losses(real_score: Tensor, fake_score: Tensor) -> tuple[Tensor, Tensor]:
    """Least-squares feature-adversarial pair.

    d_loss = mean((real-1)^2) + mean(fake^2); g_loss = mean((fake-1)^2).
    Both scores carry d_loss gradients (the discriminator must learn to push
    fakes down), so the caller computes the d-side fake score on a
    stop_gradient'ed feature: that is what keeps d_loss away from the
    generator, as the training step does.
    """
    for name, t in (("real", real_score), ("fake", fake_score)):
        if t.ndim != 2 or t.shape[1] != 1:
            raise T.DimensionError(f"{name} score must be (batch, 1), got {t.shape}")
    r = real_score.data.astype(np.float64)
    f = fake_score.data.astype(np.float64)
    d_val = ((r - 1.0) ** 2).mean() + (f * f).mean()
    g_val = ((f - 1.0) ** 2).mean()

    def d_bwd(dout, needs):
        dr = ((r - 1.0) * (2.0 * float(dout) / r.size)).astype(np.float32) if needs[0] else None
        df = (f * (2.0 * float(dout) / f.size)).astype(np.float32) if needs[1] else None
        return dr, df

    def g_bwd(dout, needs):
        return (((f - 1.0) * (2.0 * float(dout) / f.size)).astype(np.float32),)

    d_loss = T.apply_op(np.float32(d_val), (real_score, fake_score), d_bwd)
    g_loss = T.apply_op(np.float32(g_val), (fake_score,), g_bwd)
    return d_loss, g_loss


def self_recon_loss(reconstructed: Tensor, x: Tensor) -> Tensor:
    """Mean absolute difference between the self-reconstruction and the rich feature."""
    return T.reduce(reconstructed, x, "l1_mean")


def cross_cycle_loss(x_hat: Tensor, x: Tensor) -> Tensor:
    """Mean absolute difference between the cross-cycle reconstruction and the rich feature."""
    return T.reduce(x_hat, x, "l1_mean")


TERM_ORDER = ("au", "landmark", "adv_landmark", "adv_feature", "recon", "cycle")


def total_objective(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum over term families; each part is already summed over its
    source/target instances."""
    lam = {
        "au": 1.0,
        "landmark": weights.lambda_l,
        "adv_landmark": weights.lambda_ad_l,
        "adv_feature": weights.lambda_ad_f,
        "recon": weights.lambda_r,
        "cycle": weights.lambda_cc,
    }
    terms = []
    coeffs = []
    for name in TERM_ORDER:
        part = parts.get(name)
        if part is None:
            continue
        if not np.isfinite(part.data):
            raise DivergenceError(f"loss term {name!r} is non-finite: {float(part.data)}")
        terms.append(part)
        coeffs.append(lam[name])
    if not terms:
        raise ConfigurationError("total_objective needs at least one part")
    total = np.float32(sum(float(c) * float(t.data) for c, t in zip(coeffs, terms)))

    def bwd(dout, needs):
        return tuple(np.float32(c * float(dout)) if need else None for c, need in zip(coeffs, needs))

    return T.apply_op(total, tuple(terms), bwd)
