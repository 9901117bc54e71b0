"""Loss-distribution clean/noisy split, sharpening and MixUp for the semi-supervised refinement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class GMMFit:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    iterations: int
    converged: bool


@dataclass(frozen=True)
class CleanSplit:
    clean_prob: np.ndarray
    threshold: float = 0.5
    degenerate: bool = False
    fit: GMMFit | None = field(default=None, compare=False)

    @property
    def clean_mask(self) -> np.ndarray:
        return self.clean_prob > self.threshold

    @property
    def clean_indices(self) -> np.ndarray:
        return np.flatnonzero(self.clean_mask)

    @property
    def noisy_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.clean_mask)


def _log_gauss(x, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (x[:, None] - mean) ** 2 / var)


def fit_gmm_1d(x: np.ndarray, tol: float = 1e-6, max_iter: int = 100, reg: float = 1e-10) -> GMMFit | None:
    """Two-component 1-d Gaussian mixture by EM; ``None`` if a component collapses.

    Initialised from the lower and upper quartile means so the fit is a pure
    function of the data.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = np.quantile(x, [0.25, 0.75])
    low_part, high_part = x[x <= lo], x[x >= hi]
    means = np.array([low_part.mean(), high_part.mean()])
    var = np.full(2, x.var() + reg)
    weights = np.array([0.5, 0.5])
    prev = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        logp = _log_gauss(x, means, var) + np.log(weights)
        norm = np.logaddexp(logp[:, 0], logp[:, 1])
        resp = np.exp(logp - norm[:, None])
        ll = norm.mean()
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-12):
            return None
        weights = nk / len(x)
        means = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - means) ** 2).sum(axis=0) / nk + reg
        if np.any(var <= 10 * reg) or not np.all(np.isfinite(means)):
            return None
        if abs(ll - prev) < tol:
            converged = True
            break
        prev = ll
    return GMMFit(means, var, weights, it, converged)


def _median_split(losses: np.ndarray) -> np.ndarray:
    order = np.argsort(losses, kind="stable")
    prob = np.zeros(len(losses))
    prob[order[: len(losses) // 2]] = 1.0
    return prob


def dm_split(losses, threshold: float = 0.5, tol: float = 1e-6, max_iter: int = 100) -> CleanSplit:
    """Probability that each sample is clean, from a 2-component mixture on min-max normalised losses.

    ``clean_prob`` is the posterior of the lower-mean component, made
    non-increasing in the loss (each value is raised to the largest posterior
    at any loss at least as large). A collapsed fit falls back to marking the
    lower half of losses clean, with ``degenerate`` set.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or len(losses) < 10:
        raise ValueError("dm_split needs at least 10 losses")
    span = losses.max() - losses.min()
    if not np.isfinite(span) or span <= 0:
        return CleanSplit(_median_split(losses), threshold, degenerate=True)
    x = (losses - losses.min()) / span
    fit = fit_gmm_1d(x, tol, max_iter)
    if fit is None:
        return CleanSplit(_median_split(losses), threshold, degenerate=True)
    logp = _log_gauss(x, fit.means, fit.variances) + np.log(fit.weights)
    post = np.exp(logp - np.logaddexp(logp[:, 0], logp[:, 1])[:, None])
    clean = post[:, int(np.argmin(fit.means))]
    order = np.argsort(x, kind="stable")
    envelope = np.maximum.accumulate(clean[order][::-1])[::-1]
    prob = np.empty_like(clean)
    prob[order] = envelope
    return CleanSplit(np.clip(prob, 0.0, 1.0), threshold, degenerate=False, fit=fit)


def sharpen(p, temperature: float):
    """``p ** (1 / T)`` renormalised along the last axis (numpy arrays or tensors)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if isinstance(p, torch.Tensor):
        q = p.pow(1.0 / temperature)
        return q / q.sum(dim=-1, keepdim=True)
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0)) / temperature
    logp = np.where(p > 0, logp, -np.inf)
    q = np.exp(logp - logp.max(axis=-1, keepdims=True))
    return q / q.sum(axis=-1, keepdims=True)


def mixup_lambda(alpha: float, rng: np.random.Generator, size: int | None = None):
    """Beta(alpha, alpha) draws folded to ``max(l, 1 - l)``."""
    lam = rng.beta(alpha, alpha, size)
    return np.maximum(lam, 1 - lam)
