"""Small-loss sample selection for peer (co-)training."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SelectionResult:
    kept_indices: np.ndarray  # ordered by ascending loss
    keep_rate: float

    def __len__(self) -> int:
        return len(self.kept_indices)


def forget_rate_schedule(epoch: int, tau: float, t_k: int = 10, c_exp: float = 1.0) -> float:
    """Fraction of each batch to keep: ``1 - tau * min((epoch / t_k) ** c_exp, 1)``."""
    if t_k <= 0:
        raise ValueError(f"t_k must be positive, got {t_k}")
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return 1.0 - tau * min((epoch / t_k) ** c_exp, 1.0)


def keep_count(batch: int, keep_rate: float) -> int:
    # the small slack stops 0.3 * 10 = 3.0000000000000004 from rounding up to 4
    return max(1, min(batch, math.ceil(keep_rate * batch - 1e-9)))


def coteach_select(losses, keep_rate: float) -> SelectionResult:
    """Indices of the ``ceil(keep_rate * B)`` smallest losses; equal losses keep the lower index first."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ValueError("coteach_select needs a non-empty 1-d loss vector")
    if not 0.0 < keep_rate <= 1.0:
        raise ValueError(f"keep_rate must lie in (0, 1], got {keep_rate}")
    k = keep_count(losses.size, keep_rate)
    order = np.argsort(losses, kind="stable")
    return SelectionResult(order[:k], keep_rate)
