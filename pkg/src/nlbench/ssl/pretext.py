"""Pretext tasks with self-generated targets: rotation, jigsaw and magnification jigsaw."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from nlbench.images import TAG_PUZZLE, normalize, strong_augment, to_float, uniforms

GRID = 3
NUM_TILES = GRID * GRID
# nine evenly spaced factors spanning 1.00 ... 2.25
MAGNIFICATIONS = tuple(1.0 + 1.25 * k / (NUM_TILES - 1) for k in range(NUM_TILES))


@dataclass(frozen=True)
class PermutationSet:
    permutations: np.ndarray  # count x 9, each row a bijection on 0..8
    seed: int

    def __post_init__(self):
        p = np.asarray(self.permutations, dtype=np.int64)
        if p.ndim != 2 or p.shape[1] != NUM_TILES:
            raise ValueError("permutations must be count x 9")
        if not np.all(np.sort(p, axis=1) == np.arange(NUM_TILES)):
            raise ValueError("every row must be a permutation of 0..8")
        if len({r.tobytes() for r in p}) != len(p):
            raise ValueError("permutations must be distinct")
        p.setflags(write=False)
        object.__setattr__(self, "permutations", p)

    def __len__(self) -> int:
        return len(self.permutations)

    def to_text(self) -> str:
        lines = [f"# seed={self.seed}"] + [" ".join(map(str, row)) for row in self.permutations]
        return "\n".join(lines) + "\n"


@lru_cache(maxsize=1)
def _all_permutations() -> np.ndarray:
    return np.array(list(itertools.permutations(range(NUM_TILES))), dtype=np.int8)


def _hamming(columns: np.ndarray, perm: np.ndarray) -> np.ndarray:
    d = np.zeros(columns.shape[1], dtype=np.int8)
    for j in range(NUM_TILES):
        d += columns[j] != perm[j]
    return d


@lru_cache(maxsize=8)
def _greedy(count: int, seed: int) -> np.ndarray:
    cands = _all_permutations()
    columns = np.ascontiguousarray(cands.T)
    rng = np.random.default_rng(seed)
    chosen = [0]  # identity is first in lexicographic order
    dmin = _hamming(columns, cands[0])
    for _ in range(count - 1):
        best = np.flatnonzero(dmin == dmin.max())
        pick = int(best[rng.integers(len(best))])
        chosen.append(pick)
        np.minimum(dmin, _hamming(columns, cands[pick]), out=dmin)
    return cands[chosen].astype(np.int64)


def generate_permutation_set(count: int = 1000, seed: int = 0) -> PermutationSet:
    """Greedy max-min Hamming selection over all 9! orderings, starting from the identity.

    Each step adds a candidate whose Hamming distance to its nearest chosen
    permutation is largest; ties are broken by a generator seeded with ``seed``.
    """
    total = math.factorial(NUM_TILES)
    if not 1 <= count <= total:
        raise ValueError(f"count must be in [1, {total}], got {count}")
    return PermutationSet(_greedy(count, seed), seed)


def save_permutation_set(perms: PermutationSet, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(perms.to_text())
    return path


def load_permutation_set(path: str | Path) -> PermutationSet:
    seed, rows = 0, []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line.startswith("# seed="):
            seed = int(line.split("=", 1)[1])
        elif line and not line.startswith("#"):
            rows.append([int(t) for t in line.split()])
    return PermutationSet(np.array(rows), seed)


def _check_square(images: torch.Tensor) -> None:
    if images.ndim != 4 or images.shape[-1] != images.shape[-2]:
        raise ValueError(f"expected a batch of square images, got shape {tuple(images.shape)}")


def rotation_batch(images: torch.Tensor, indices, seed: int, epoch: int,
                   augment: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Each image four times, rotated by 0/90/180/270 degrees; labels 0..3.

    Output row ``4 * i + k`` is image ``i`` rotated ``k`` quarter turns
    counter-clockwise.
    """
    _check_square(images)
    x = strong_augment(images, indices, seed, epoch) if augment else images
    x = normalize(x)
    out = torch.stack([torch.rot90(x, k, dims=(-2, -1)) for k in range(4)], dim=1)
    labels = torch.arange(4).repeat(len(x))
    return out.flatten(0, 1), labels


def normalize_patches(patches: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Zero-mean, unit-(population)-std per patch over its channels and pixels."""
    flat = patches.flatten(-3)
    mean = flat.mean(dim=-1, keepdim=True)
    std = flat.std(dim=-1, unbiased=False, keepdim=True)
    return ((flat - mean) / std.clamp_min(eps)).view_as(patches)


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


def _puzzle_targets(perm_set: PermutationSet, indices, seed: int, epoch: int, column: int) -> torch.Tensor:
    u = uniforms(seed, epoch, TAG_PUZZLE, indices, column + 1)[:, column].double()
    return (u * len(perm_set)).long().clamp(max=len(perm_set) - 1)


def _prepare(images: torch.Tensor, indices, seed: int, epoch: int, augment: bool) -> torch.Tensor:
    _check_square(images)
    if images.shape[-1] < GRID:
        raise ValueError(f"image side {images.shape[-1]} is smaller than the {GRID}x{GRID} grid")
    x = strong_augment(images, indices, seed, epoch) if augment else images
    return to_float(x)


def jigsaw_batch(images: torch.Tensor, perm_set: PermutationSet, indices, seed: int, epoch: int,
                 patch_size: int = 64, augment: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Cut each image into a 3x3 grid, shuffle tiles by a sampled permutation.

    Returns ``B x 9 x 3 x P x P`` self-normalised patches, where slot ``j``
    holds tile ``perm[j]`` (raster order), and the permutation indices.
    """
    x = _prepare(images, indices, seed, epoch, augment)
    tile = x.shape[-1] // GRID
    tiles = torch.stack([x[:, :, r * tile:(r + 1) * tile, c * tile:(c + 1) * tile]
                         for r in range(GRID) for c in range(GRID)], dim=1)
    b = len(x)
    tiles = _resize(tiles.flatten(0, 1), patch_size).view(b, NUM_TILES, 3, patch_size, patch_size)
    targets = _puzzle_targets(perm_set, indices, seed, epoch, 0)
    order = torch.tensor(perm_set.permutations)[targets]
    out = torch.gather(tiles, 1, order.view(b, NUM_TILES, 1, 1, 1).expand_as(tiles))
    return normalize_patches(out), targets


def jigmag_boxes(side: int, indices, seed: int, epoch: int) -> torch.Tensor:
    """Crop boxes ``(top, left, size)`` for each image and magnification (``B x 9 x 3``)."""
    tile = side // GRID
    u = uniforms(seed, epoch, TAG_PUZZLE, indices, 1 + 2 * NUM_TILES)[:, 1:].double()
    boxes = torch.empty(u.shape[0], NUM_TILES, 3, dtype=torch.long)
    for k, m in enumerate(MAGNIFICATIONS):
        size = max(1, int(round(tile / m)))
        room = side - size + 1
        boxes[:, k, 0] = (u[:, 2 * k] * room).long().clamp(max=room - 1)
        boxes[:, k, 1] = (u[:, 2 * k + 1] * room).long().clamp(max=room - 1)
        boxes[:, k, 2] = size
    return boxes


def jigmag_batch(images: torch.Tensor, perm_set: PermutationSet, indices, seed: int, epoch: int,
                 patch_size: int = 64, augment: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Nine crops at random locations, one per magnification in ``MAGNIFICATIONS``, each
    resized to ``P x P``; slot ``j`` holds the crop of magnification ``perm[j]``."""
    x = _prepare(images, indices, seed, epoch, augment)
    boxes = jigmag_boxes(x.shape[-1], indices, seed, epoch)
    b = len(x)
    crops = torch.empty(b, NUM_TILES, 3, patch_size, patch_size)
    for i in range(b):
        for k in range(NUM_TILES):
            t, l, s = boxes[i, k].tolist()
            crops[i, k] = _resize(x[i:i + 1, :, t:t + s, l:l + s], patch_size)[0]
    targets = _puzzle_targets(perm_set, indices, seed, epoch, 0)
    order = torch.tensor(perm_set.permutations)[targets]
    out = torch.gather(crops, 1, order.view(b, NUM_TILES, 1, 1, 1).expand_as(crops))
    return normalize_patches(out), targets
