"""Momentum contrast: key queue, momentum encoder update and the contrastive step."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class MomentumQueue:
    """Ring buffer of ``size`` L2-normalised keys with FIFO eviction.

    ``init="random"`` pre-fills the buffer with random unit vectors (so it is
    full from the start); ``init="empty"`` starts empty and grows to ``size``.
    """

    def __init__(self, size: int, dim: int, init: str = "random", generator: torch.Generator | None = None):
        if size <= 0 or dim <= 0:
            raise ValueError("queue size and dim must be positive")
        if init not in ("random", "empty"):
            raise ValueError(f"unknown queue init {init!r}")
        self.size, self.dim = size, dim
        if init == "random":
            self.keys = F.normalize(torch.randn(size, dim, generator=generator), dim=1)
            self.filled = size
        else:
            self.keys = torch.zeros(size, dim)
            self.filled = 0
        self.write_cursor = 0

    def __len__(self) -> int:
        return self.filled

    def enqueue(self, keys: torch.Tensor) -> None:
        b = keys.shape[0]
        if b > self.size:
            raise ValueError(f"cannot enqueue {b} keys into a queue of size {self.size}")
        if keys.shape[1] != self.dim:
            raise ValueError(f"key dim {keys.shape[1]} != queue dim {self.dim}")
        idx = (self.write_cursor + torch.arange(b)) % self.size
        self.keys[idx] = keys.detach().to(self.keys.dtype)
        self.write_cursor = (self.write_cursor + b) % self.size
        self.filled = min(self.size, self.filled + b)

    def ordered(self) -> torch.Tensor:
        """Stored keys from oldest to newest."""
        if self.filled < self.size:
            return self.keys[: self.filled].clone()
        return torch.cat([self.keys[self.write_cursor:], self.keys[: self.write_cursor]])

    def negatives(self) -> torch.Tensor:
        return self.keys[: self.filled] if self.filled < self.size else self.keys


@torch.no_grad()
def momentum_update(key_model: nn.Module, query_model: nn.Module, m: float) -> None:
    """key <- m * key + (1 - m) * query for every parameter."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    for pk, pq in zip(key_model.parameters(), query_model.parameters()):
        if m == 1.0:
            continue
        pk.mul_(m).add_(pq.detach(), alpha=1.0 - m)


def _shuffled_keys(key_model: nn.Module, x: torch.Tensor, bn_splits: int, generator: torch.Generator | None):
    # batch norm runs on shuffled sub-batches so keys cannot share statistics with their queries
    perm = torch.randperm(x.shape[0], generator=generator)
    chunks = [key_model(c) for c in x[perm].chunk(max(1, bn_splits))]
    k = torch.empty_like(torch.cat(chunks))
    k[perm] = torch.cat(chunks)
    return k


def moco_step(query_model: nn.Module, key_model: nn.Module, queue: MomentumQueue, batch: tuple[torch.Tensor, torch.Tensor],
              temperature: float, m: float, bn_splits: int = 2,
              generator: torch.Generator | None = None) -> tuple[torch.Tensor, MomentumQueue]:
    """One contrastive step: momentum-update the key encoder, score queries against their
    positive key and the queued negatives, then enqueue the new keys.

    Returns the loss (differentiable w.r.t. the query model) and the updated queue.
    """
    x_q, x_k = batch
    if x_q.shape[0] > queue.size:
        raise ValueError(f"batch of {x_q.shape[0]} exceeds queue size {queue.size}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q = F.normalize(query_model(x_q), dim=1)
    with torch.no_grad():
        momentum_update(key_model, query_model, m)
        k = F.normalize(_shuffled_keys(key_model, x_k, bn_splits, generator), dim=1)
    pos = (q * k).sum(dim=1, keepdim=True)
    neg = q @ queue.negatives().clone().T.to(q.dtype)
    logits = torch.cat([pos, neg], dim=1) / temperature
    loss = F.cross_entropy(logits, torch.zeros(len(q), dtype=torch.long))
    queue.enqueue(k)
    return loss, queue
