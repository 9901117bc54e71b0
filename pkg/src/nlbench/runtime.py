"""Thread and determinism settings shared by the training loops."""
from __future__ import annotations

import os

import torch


def set_single_threaded() -> None:
    """Pin torch to one thread and deterministic kernels for bitwise-reproducible runs."""
    os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return g
