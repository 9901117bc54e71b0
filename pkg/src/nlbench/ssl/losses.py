"""Contrastive, redundancy-reduction and variational objectives."""
from __future__ import annotations

import torch
import torch.nn.functional as F

BARLOW_LAMBDA_OFF = 5.1e-3


def ntxent_loss(embeddings: torch.Tensor, temperature: float) -> torch.Tensor:
    """Normalized-temperature cross entropy over ``2N`` embeddings.

    Rows ``i`` and ``i + N`` are the two views of one sample. Each anchor's
    positive competes against the other ``2N - 1`` embeddings under cosine
    similarity divided by ``temperature``; the loss averages all ``2N`` anchors.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if embeddings.ndim != 2 or embeddings.shape[0] % 2:
        raise ValueError("expected a 2N x D embedding matrix")
    n2 = embeddings.shape[0]
    if n2 < 4:
        raise ValueError("need at least two positive pairs")
    z = F.normalize(embeddings, dim=1)
    sim = z @ z.T / temperature
    sim = sim.masked_fill(torch.eye(n2, dtype=torch.bool, device=z.device), float("-inf"))
    targets = (torch.arange(n2, device=z.device) + n2 // 2) % n2
    return F.cross_entropy(sim, targets)


def _standardize(z: torch.Tensor, min_var: float = 1e-24) -> torch.Tensor:
    # population statistics so that a vector correlates with itself at exactly 1;
    # the variance floor only guards constant columns
    centered = z - z.mean(dim=0)
    return centered / torch.sqrt(centered.pow(2).mean(dim=0).clamp_min(min_var))


def cross_correlation(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ValueError("z1 and z2 must both be batch x D")
    if z1.shape[0] < 2:
        raise ValueError("cross-correlation needs a batch of at least 2")
    return _standardize(z1).T @ _standardize(z2) / z1.shape[0]


def barlow_loss(z1: torch.Tensor, z2: torch.Tensor, lambda_off: float = BARLOW_LAMBDA_OFF) -> torch.Tensor:
    """Sum of squared deviations of the cross-correlation from the identity,
    off-diagonal terms weighted by ``lambda_off``."""
    c = cross_correlation(z1, z2)
    on = (torch.diagonal(c) - 1).pow(2).sum()
    off = c.pow(2).sum() - torch.diagonal(c).pow(2).sum()
    return on + lambda_off * off


def kld(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL divergence from N(mu, exp(logvar)) to N(0, I), summed over latent dims, averaged over the batch."""
    per_sample = -0.5 * (1 + logvar - mu.pow(2) - logvar.exp()).sum(dim=-1)
    return per_sample.mean()


def reconstruction_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared error summed over pixels, averaged over the batch."""
    return (recon - target).pow(2).flatten(1).sum(dim=1).mean()
