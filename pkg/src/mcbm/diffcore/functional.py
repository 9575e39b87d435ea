"""Activations, losses and Gaussian helpers built on :mod:`.tensor`."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ShapeError, _record_kink, as_tensor, tsum

PROB_EPS = 1e-12


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


def relu(t: Tensor) -> Tensor:
    t = as_tensor(t)
    d = t.data
    _record_kink(np.abs(d))
    pos = d > 0
    return Tensor._make(np.maximum(d, 0.0), (t,), lambda g: (g * pos,))


def sigmoid(t: Tensor) -> Tensor:
    t = as_tensor(t)
    out = _sigmoid(t.data)
    return Tensor._make(out, (t,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh(t: Tensor) -> Tensor:
    t = as_tensor(t)
    out = np.tanh(t.data)
    return Tensor._make(out, (t,), lambda g: (g * (1.0 - out * out),))


def _check_axis(t: Tensor, axis: int) -> None:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {t.shape}")


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return Tensor._make(out, (t,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(out, (t,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def heaviside(t: Tensor, threshold: float = 0.5) -> Tensor:
    """1 where ``t >= threshold`` else 0. Carries no gradient."""
    return Tensor((as_tensor(t).data >= threshold).astype(np.float64))


# -- losses -------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k or not np.all(labels == np.round(labels))):
        raise DomainError(f"labels must be integers in [0, {k})")
    labels = labels.astype(np.int64)
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return Tensor._make(np.asarray(loss), (logits,), backward)


def binary_cross_entropy(prob: Tensor, label) -> Tensor:
    """Mean Bernoulli NLL; probabilities clamped to [1e-12, 1 - 1e-12]."""
    prob = as_tensor(prob)
    label = np.broadcast_to(np.asarray(label, dtype=np.float64), prob.shape)
    if np.any((label < 0) | (label > 1)):
        raise DomainError("binary labels must lie in [0, 1]")
    p = prob.data
    _record_kink(np.minimum(np.abs(p - PROB_EPS), np.abs(p - (1 - PROB_EPS))))
    inside = (p >= PROB_EPS) & (p <= 1 - PROB_EPS)
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    n = p.size
    loss = -(label * np.log(pc) + (1 - label) * np.log1p(-pc)).mean()

    def backward(g):
        return ((-(label / pc) + (1 - label) / (1 - pc)) * inside * (g / n),)

    return Tensor._make(np.asarray(loss), (prob,), backward)


def mse(pred: Tensor, target) -> Tensor:
    """Squared error summed over feature dims, averaged over the batch."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred - target
    sq = diff * diff
    n = pred.shape[0] if pred.ndim else 1
    return tsum(sq) * (1.0 / n)


# -- Gaussian helpers -----------------------------------------------------------


def gaussian_reparam_sample(mu: Tensor, sigma: float, rng: np.random.Generator) -> Tensor:
    """``mu + sigma * eps`` with ``eps ~ N(0, I)``; ``sigma == 0`` returns ``mu``."""
    mu = as_tensor(mu)
    sigma = float(sigma)
    if not np.isfinite(sigma):
        raise DomainError("sigma must be finite")
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return mu
    eps = rng.standard_normal(mu.shape)
    return mu + Tensor(sigma * eps)


def kl_diag_gaussians(mu_p, sigma_p: float, mu_q, sigma_q: float) -> Tensor:
    """KL(N(mu_p, sigma_p^2 I) || N(mu_q, sigma_q^2 I)) over the last axis.

    Returns a scalar for 1-D means and a per-row vector for [B, d] means.
    """
    sigma_p, sigma_q = float(sigma_p), float(sigma_q)
    if sigma_p <= 0 or sigma_q <= 0:
        raise DomainError(f"KL needs positive scales, got {sigma_p}, {sigma_q}")
    mu_p, mu_q = as_tensor(mu_p), as_tensor(mu_q)
    if mu_p.shape != mu_q.shape:
        raise ShapeError(f"kl: {mu_p.shape} vs {mu_q.shape}")
    d = mu_p.shape[-1] if mu_p.ndim else 1
    vp, vq = sigma_p**2, sigma_q**2
    const = 0.5 * (d * vp / vq - d + d * np.log(vq / vp))
    diff = mu_p - mu_q
    quad = tsum(diff * diff, axis=-1) * (0.5 / vq)
    return quad + const if const != 0.0 else quad
