"""Cosine variance-preserving noise schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: Tensor  # (T + 1,) float64
    sigma: Tensor

    def coef(self, t: Tensor | int, like: Tensor) -> tuple[Tensor, Tensor]:
        """(alpha_t, sigma_t) broadcastable against ``like`` (B, C, H, W)."""
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(like.shape[0])
        shape = (-1,) + (1,) * (like.dim() - 1)
        return self.alpha[t].to(like.dtype).reshape(shape), self.sigma[t].to(like.dtype).reshape(shape)


def make_schedule(T: int = 64, kind: str = "cosine") -> NoiseSchedule:
    if T < 4:
        raise ValueError("T must be >= 4")
    if kind != "cosine":
        raise ValueError(f"unknown schedule kind {kind!r}")
    t = torch.arange(T + 1, dtype=torch.float64)
    alpha = torch.cos(t / T * math.pi / 2).clamp(1e-4, 1.0)
    alpha[0] = 1.0
    sigma = torch.sqrt(1.0 - alpha**2)
    sigma[0] = 0.0
    return NoiseSchedule(T, alpha, sigma)
