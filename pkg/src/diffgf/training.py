"""Training plumbing: seeding, tensor layout helpers, and learning-rate protocols."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np
import torch


class DivergenceError(RuntimeError):
    """A training loss became NaN or infinite."""


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


def to_nchw(a: np.ndarray) -> torch.Tensor:
    """(H, W, C) array -> (1, C, H, W) float32 tensor."""
    return torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float32).permute(2, 0, 1).unsqueeze(0)


def to_hwc(t: torch.Tensor) -> np.ndarray:
    return t[0].permute(1, 2, 0).detach().cpu().numpy().astype(np.float64)


@dataclass(frozen=True)
class TrainProtocol:
    """Epoch budget, batch size, and a shaped learning-rate schedule.

    ``schedule`` selects the shape, ``lr`` its peak. ``"constant_cosine"``
    holds the peak for ``constant_frac`` of training and then cosine-decays
    to ``lr * final_ratio``. ``"staged"`` warms up linearly from ``lr / 10``,
    holds, then decays in two linear stages to ``lr / 2`` and ``lr / 5``.
    """

    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    schedule: str = "constant_cosine"
    constant_frac: float = 0.25
    final_ratio: float = 0.5
    weight_decay: float = 0.0

    def lr_at(self, progress: float) -> float:
        """Learning rate at ``progress`` in [0, 1] of the run."""
        p = min(max(progress, 0.0), 1.0)
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "constant_cosine":
            if p <= self.constant_frac:
                return self.lr
            q = (p - self.constant_frac) / max(1e-12, 1.0 - self.constant_frac)
            lo = self.lr * self.final_ratio
            return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * q))
        if self.schedule == "staged":
            # breakpoints at 20/1000, 100/1000 and 500/1000 of the run
            knots = [(0.0, 0.1), (0.02, 1.0), (0.1, 1.0), (0.5, 0.5), (1.0, 0.2)]
            for (p0, r0), (p1, r1) in zip(knots, knots[1:]):
                if p <= p1:
                    return self.lr * (r0 + (r1 - r0) * (p - p0) / (p1 - p0))
            return self.lr * knots[-1][1]
        raise ValueError(f"unknown lr schedule {self.schedule!r}")


DIFFUSION_PROTOCOL = TrainProtocol(epochs=200, batch_size=8, lr=1e-4, schedule="constant_cosine", constant_frac=0.25)
REFINER_PROTOCOL = TrainProtocol(epochs=1000, batch_size=32, lr=1e-4, schedule="staged")


def smooth(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
