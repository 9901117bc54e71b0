"""Variational autoencoder on a residual encoder trunk."""
from __future__ import annotations

import warnings
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from nlbench.backbone import ResNetEncoder
from nlbench.ssl.losses import kld, reconstruction_loss


class VAE(nn.Module):
    """Encoder trunk + 3-layer MLP to (mu, logvar); decoder is a 2-layer MLP, three
    stride-2 transposed convolutions and a bilinear resize to the input size."""

    def __init__(self, encoder: ResNetEncoder, latent_dim: int = 256, decoder_channels=(128, 64, 32),
                 seed_size: int = 4):
        super().__init__()
        f = encoder.feature_dim
        self.encoder = encoder
        self.latent_dim = latent_dim
        self.to_latent = nn.Sequential(nn.Linear(f, f), nn.ReLU(inplace=True), nn.Linear(f, f), nn.ReLU(inplace=True),
                                       nn.Linear(f, 2 * latent_dim))
        c0, c1, c2 = decoder_channels
        self.seed_size = seed_size
        self.decoder_mlp = nn.Sequential(nn.Linear(latent_dim, f), nn.ReLU(inplace=True),
                                         nn.Linear(f, c0 * seed_size * seed_size), nn.ReLU(inplace=True))
        self.decoder_conv = nn.Sequential(
            nn.ConvTranspose2d(c0, c1, 4, 2, 1), nn.BatchNorm2d(c1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c1, c2, 4, 2, 1), nn.BatchNorm2d(c2), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c2, 3, 4, 2, 1),
        )
        self.output_size = encoder.spec.input_size

    def encode(self, x):
        mu, logvar = self.to_latent(self.encoder(x)).chunk(2, dim=1)
        return mu, logvar

    def decode(self, z):
        h = self.decoder_mlp(z).view(len(z), -1, self.seed_size, self.seed_size)
        h = self.decoder_conv(h)
        h = F.interpolate(h, size=(self.output_size, self.output_size), mode="bilinear", align_corners=False)
        return torch.sigmoid(h)

    def forward(self, x, generator: torch.Generator | None = None):
        mu, logvar = self.encode(x)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + eps * torch.exp(0.5 * logvar)
        return self.decode(z), mu, logvar


def check_beta(beta: float, allow_nonpositive: bool = False) -> None:
    if beta <= 0:
        if not allow_nonpositive:
            raise ValueError(f"KLD weight beta must be positive, got {beta} (pass allow_nonpositive_beta to override)")
        warnings.warn(f"training VAE with non-positive KLD weight beta={beta}", stacklevel=3)


def vae_loss(model: VAE, x_in: torch.Tensor, target: torch.Tensor, beta: float,
             generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Total loss, reconstruction term and KLD term."""
    recon, mu, logvar = model(x_in, generator)
    rec = reconstruction_loss(recon, target)
    div = kld(mu, logvar)
    return rec + beta * div, rec, div


def vae_step(model: VAE, optimizer: torch.optim.Optimizer, batch: tuple[torch.Tensor, torch.Tensor], beta: float,
             allow_nonpositive_beta: bool = False, generator: torch.Generator | None = None) -> float:
    """One optimisation step on reconstruction + beta * KLD; ``batch`` is (normalized input, [0,1] target)."""
    check_beta(beta, allow_nonpositive_beta)
    x_in, target = batch
    optimizer.zero_grad(set_to_none=True)
    loss, _, _ = vae_loss(model, x_in, target, beta, generator)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def dump_samples(model: VAE, out_dir: str | Path, epoch: int, n: int = 16, seed: int = 0) -> Path:
    """Decode ``n`` prior samples into a PNG grid for visual review."""
    from torchvision.utils import save_image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    was_training = model.training
    model.eval()
    g = torch.Generator().manual_seed(seed)
    images = model.decode(torch.randn(n, model.latent_dim, generator=g))
    model.train(was_training)
    path = out_dir / f"samples_epoch{epoch:04d}.png"
    save_image(images, path, nrow=int(n ** 0.5) or 1)
    return path
