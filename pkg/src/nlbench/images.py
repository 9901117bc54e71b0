"""Image decoding and batched augmentations.

Every random augmentation parameter is drawn from :mod:`nlbench.rng` keyed on
``(seed, epoch, tag)`` and the sample's dataset index, so an image receives the
same augmentation whatever batch it lands in.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF
from PIL import Image

from nlbench.rng import keyed_uniform, keyed_uniform_matrix

MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

# augmentation stream tags
TAG_ORDER, TAG_VIEW1, TAG_VIEW2, TAG_WEAK, TAG_ROT, TAG_PUZZLE, TAG_MIX = range(7)


@lru_cache(maxsize=8)
def _load_cached(paths: tuple[str, ...], size: int) -> torch.Tensor:
    out = torch.empty((len(paths), 3, size, size), dtype=torch.uint8)
    for i, p in enumerate(paths):
        with Image.open(p) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            out[i] = torch.from_numpy(np.asarray(im, dtype=np.uint8).copy()).permute(2, 0, 1)
    out.requires_grad_(False)
    return out


def load_images(paths: Sequence[str], size: int) -> torch.Tensor:
    """Decode images to an ``N x 3 x size x size`` uint8 tensor (cached per path list)."""
    if not paths:
        raise ValueError("no images to load")
    return _load_cached(tuple(str(p) for p in paths), int(size))


def to_float(x: torch.Tensor) -> torch.Tensor:
    return x.float().div_(255.0) if x.dtype == torch.uint8 else x


def normalize(x: torch.Tensor) -> torch.Tensor:
    return (to_float(x) - MEAN) / STD


def uniforms(seed: int, epoch: int, tag: int, indices, width: int) -> torch.Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    return torch.from_numpy(keyed_uniform_matrix((seed, epoch, tag), idx, width)).float()


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """A permutation of ``range(n)`` that depends only on ``(seed, epoch)``."""
    return np.argsort(keyed_uniform((seed, epoch, TAG_ORDER), np.arange(n)), kind="stable")


def batches(n: int, batch_size: int, seed: int, epoch: int, drop_last: bool = False):
    order = epoch_order(n, seed, epoch)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for start in range(0, stop, batch_size):
        yield order[start:start + batch_size]


def _affine(x: torch.Tensor, theta: torch.Tensor, padding_mode: str = "zeros") -> torch.Tensor:
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode=padding_mode, align_corners=False)


def resized_crop_flip(x: torch.Tensor, u: torch.Tensor, scale=(0.2, 1.0), ratio=(3 / 4, 4 / 3)) -> torch.Tensor:
    """Random resized crop plus horizontal flip; ``u`` holds 5 uniforms per sample."""
    area = scale[0] + (scale[1] - scale[0]) * u[:, 0]
    logr = math.log(ratio[0]) + (math.log(ratio[1]) - math.log(ratio[0])) * u[:, 1]
    r = torch.exp(logr)
    w = torch.sqrt(area * r).clamp(max=1.0)
    h = torch.sqrt(area / r).clamp(max=1.0)
    cx = (1 - w) * (2 * u[:, 2] - 1)
    cy = (1 - h) * (2 * u[:, 3] - 1)
    flip = torch.where(u[:, 4] < 0.5, -1.0, 1.0)
    theta = torch.zeros(len(x), 2, 3)
    theta[:, 0, 0] = w * flip
    theta[:, 0, 2] = cx
    theta[:, 1, 1] = h
    theta[:, 1, 2] = cy
    return _affine(x, theta, "border")


def _gray(x: torch.Tensor) -> torch.Tensor:
    return (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])


def color_jitter(x: torch.Tensor, u: torch.Tensor, strength: float = 0.5, p: float = 0.8,
                 p_gray: float = 0.2) -> torch.Tensor:
    """Brightness, contrast, saturation and hue jitter applied with probability ``p``,
    then random grayscale; ``u`` holds 6 uniforms per sample."""
    s = 0.8 * strength
    view = (-1, 1, 1, 1)
    on = (u[:, 0] < p).float().view(view)
    b = 1 + s * (2 * u[:, 1] - 1)
    c = 1 + s * (2 * u[:, 2] - 1)
    sat = 1 + s * (2 * u[:, 3] - 1)
    hue = 0.2 * strength * (2 * u[:, 4] - 1) * 2 * math.pi
    y = x * b.view(view)
    m = _gray(y).mean(dim=(2, 3), keepdim=True)
    y = (y - m) * c.view(view) + m
    g = _gray(y)
    y = (y - g) * sat.view(view) + g
    # hue: rotate chroma in YIQ space
    yiq = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    q = torch.einsum("ij,bjhw->bihw", yiq, y)
    cos, sin = torch.cos(hue).view(-1, 1, 1), torch.sin(hue).view(-1, 1, 1)
    i2 = q[:, 1] * cos - q[:, 2] * sin
    q2 = q[:, 1] * sin + q[:, 2] * cos
    q = torch.stack([q[:, 0], i2, q2], dim=1)
    y = torch.einsum("ij,bjhw->bihw", torch.linalg.inv(yiq), q).clamp(0, 1)
    y = on * y + (1 - on) * x
    gray = (u[:, 5] < p_gray).float().view(view)
    return gray * _gray(y).expand_as(y) + (1 - gray) * y


def contrastive_views(images: torch.Tensor, indices, seed: int, epoch: int,
                      strength: float = 0.5) -> tuple[torch.Tensor, torch.Tensor]:
    """Two independently augmented, normalized views of each image."""
    x = to_float(images)
    out = []
    for tag in (TAG_VIEW1, TAG_VIEW2):
        u = uniforms(seed, epoch, tag, indices, 11)
        out.append(normalize(color_jitter(resized_crop_flip(x, u[:, :5]), u[:, 5:], strength)))
    return out[0], out[1]


def weak_augment(images: torch.Tensor, indices, seed: int, epoch: int, pad: int = 4, tag: int = TAG_WEAK) -> torch.Tensor:
    """Reflect-padded random crop plus horizontal flip, normalized."""
    x = to_float(images)
    n, _, h, w = x.shape
    u = uniforms(seed, epoch, tag, indices, 3)
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    dy = (u[:, 0] * (2 * pad + 1)).long().clamp(max=2 * pad)
    dx = (u[:, 1] * (2 * pad + 1)).long().clamp(max=2 * pad)
    out = torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    flip = u[:, 2] < 0.5
    out[flip] = out[flip].flip(-1)
    return normalize(out)


def strong_augment(images: torch.Tensor, indices, seed: int, epoch: int, tag: int = TAG_ROT) -> torch.Tensor:
    """Flip, small rotation (<= 10 degrees), sharpness, equalize and auto-contrast; uint8 in, uint8 out."""
    if images.dtype != torch.uint8:
        raise TypeError("strong_augment expects uint8 images")
    u = uniforms(seed, epoch, tag, indices, 7)
    out = []
    for i, img in enumerate(images):
        if u[i, 0] < 0.5:
            img = TF.horizontal_flip(img)
        img = TF.rotate(img, float(20 * u[i, 1] - 10), interpolation=TF.InterpolationMode.BILINEAR)
        if u[i, 2] < 0.5:
            img = TF.adjust_sharpness(img, float(0.5 + 1.5 * u[i, 3]))
        if u[i, 4] < 0.2:
            img = TF.equalize(img)
        if u[i, 5] < 0.5:
            img = TF.autocontrast(img)
        out.append(img)
    return torch.stack(out)
