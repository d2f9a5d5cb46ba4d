"""Forward diffusion noising, its algebraic inverse, and the sampling loop.

The forward process corrupts a clean latent as

    z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps,   t in {1..T},

with abar_t the running product of (1 - beta_s). Schedule tables are kept
in float64 so the product identity holds to ~1e-13 relative error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .tensors import LatentTensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance tables. Index with 1-based step t via the accessors."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars"):
            arr = getattr(self, name)
            if arr.ndim != 1 or arr.size < 1:
                raise ValueError(f"{name} must be a nonempty 1-D array")
        if self.betas.min() < 0.0 or self.betas.max() >= 1.0:
            raise ValueError("betas must lie in [0, 1)")
        if not (self.alpha_bars > 0.0).all() or not (self.alpha_bars <= 1.0).all():
            raise ValueError("alpha_bars must lie in (0, 1]")

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        self._check_step(t)
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step index t={t} outside {{1..{self.T}}}")


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule: betas interpolate beta_start -> beta_end over T steps."""
    if T < 1:
        raise ValueError(f"step count T={T} must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"beta endpoints must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_noise(z0: LatentTensor, t: int, eps: LatentTensor, schedule: NoiseSchedule) -> LatentTensor:
    """Corrupt z0 at step t with the given noise draw."""
    if eps.data.shape != z0.data.shape:
        raise ValueError(
            f"noise shape {tuple(eps.data.shape)} != latent shape {tuple(z0.data.shape)}"
        )
    ab = schedule.alpha_bar(t)
    data = math.sqrt(ab) * z0.data + math.sqrt(1.0 - ab) * eps.data
    return LatentTensor(data, scale=z0.scale)


def forward_noise_batch(
    z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Batched forward noising: z0, eps are (B,C,H,W), t is (B,) of 1-based steps."""
    if eps.shape != z0.shape:
        raise ValueError("noise/latent shape mismatch")
    tn = t.detach().cpu().numpy()
    if tn.min() < 1 or tn.max() > schedule.T:
        raise ValueError(f"step indices outside {{1..{schedule.T}}}")
    ab = torch.from_numpy(schedule.alpha_bars[tn - 1]).view(-1, 1, 1, 1)
    return ab.sqrt().to(z0.dtype) * z0 + (1.0 - ab).sqrt().to(z0.dtype) * eps


def predict_x0_from_eps(
    z_t: LatentTensor, eps_hat: LatentTensor, t: int, schedule: NoiseSchedule
) -> LatentTensor:
    """Algebraic inverse of forward_noise: recover the clean latent from a noise estimate."""
    if eps_hat.data.shape != z_t.data.shape:
        raise ValueError("noise-estimate/latent shape mismatch")
    ab = schedule.alpha_bar(t)
    data = (z_t.data - math.sqrt(1.0 - ab) * eps_hat.data) / math.sqrt(ab)
    return LatentTensor(data, scale=z_t.scale)


def predict_x0_batch(
    z_t: torch.Tensor, eps_hat: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    tn = t.detach().cpu().numpy()
    if tn.min() < 1 or tn.max() > schedule.T:
        raise ValueError(f"step indices outside {{1..{schedule.T}}}")
    ab = torch.from_numpy(schedule.alpha_bars[tn - 1]).view(-1, 1, 1, 1)
    return (z_t - (1.0 - ab).sqrt().to(z_t.dtype) * eps_hat) / ab.sqrt().to(z_t.dtype)


def strided_timesteps(T: int, steps: int) -> list[int]:
    """Strictly decreasing 1-based step subsequence of length <= steps, ending at 1."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps={steps} must lie in {{1..{T}}}")
    if steps == 1:
        return [1]
    raw = np.linspace(T, 1, steps)
    seq = sorted({int(round(v)) for v in raw}, reverse=True)
    return seq


DenoiseFn = Callable[[torch.Tensor, int, object], torch.Tensor]


def sample(
    denoiser: DenoiseFn,
    conditioning: object,
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
    shape: tuple[int, int, int] | None = None,
    eta: float = 1.0,
    x0_clamp: float | None = None,
) -> LatentTensor:
    """Iteratively refine seeded Gaussian noise into a clean latent.

    ``denoiser(z, t, conditioning)`` must return a noise prediction with z's
    shape. ``eta=1`` gives ancestral stepping; ``eta=0`` the deterministic
    strided variant. Output is a pure function of the inputs and the seed.
    """
    if shape is None:
        ego = getattr(conditioning, "ego_latent", None)
        if ego is None:
            raise ValueError("latent shape not supplied and not derivable from conditioning")
        shape = tuple(ego.data.shape) if isinstance(ego, LatentTensor) else tuple(ego.shape)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(*shape, generator=gen)
    seq = strided_timesteps(schedule.T, steps)
    for i, t in enumerate(seq):
        eps_hat = denoiser(z, t, conditioning)
        if eps_hat.shape != z.shape:
            raise RuntimeError(
                f"denoiser returned shape {tuple(eps_hat.shape)} at t={t}, "
                f"expected {tuple(z.shape)}"
            )
        ab_t = schedule.alpha_bar(t)
        x0 = (z - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        if x0_clamp is not None:
            x0 = x0.clamp(-x0_clamp, x0_clamp)
        t_prev = seq[i + 1] if i + 1 < len(seq) else 0
        if t_prev == 0:
            z = x0
            break
        ab_p = schedule.alpha_bar(t_prev)
        sigma = eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)
        direction = math.sqrt(max(1.0 - ab_p - sigma * sigma, 0.0)) * eps_hat
        z = math.sqrt(ab_p) * x0 + direction
        if sigma > 0.0:
            z = z + sigma * torch.randn(*shape, generator=gen)
    return LatentTensor(z)
