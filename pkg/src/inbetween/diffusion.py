"""DDPM noise schedule, forward noising, epsilon loss and ancestral sampling.

Timesteps are 1-based: ``t = 1 .. T``. The functions accept numpy arrays or
torch tensors; schedule coefficients are plain Python floats.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        return float(self.betas[self._index(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._index(t)])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to ``t``; ``alpha_bar(0) == 1``."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self._index(t)])

    def _index(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")
        return int(t) - 1


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule."""
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def default_schedule(T: int = 50) -> NoiseSchedule:
    """Linear schedule with the usual 1e-4..0.02 range rescaled by 1000 / T.

    Keeps alpha_bar_T close to zero for short chains.
    """
    scale = 1000.0 / T
    return make_schedule(T, min(1e-4 * scale, 0.999), min(0.02 * scale, 0.999))


def forward_noise(x0, t: int, eps, s: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    if x0.shape != eps.shape:
        raise ScheduleError(f"shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")
    ab = s.alpha_bar(s._index(t) + 1)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_noise_batch(x0, t, eps, s: NoiseSchedule):
    """Vectorized :func:`forward_noise` over a leading batch axis of timesteps."""
    import torch

    ab = torch.as_tensor(s.alpha_bars, dtype=x0.dtype)[torch.as_tensor(t) - 1]
    ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def epsilon_loss(eps_hat, eps):
    """Mean squared error between predicted and true noise."""
    if tuple(eps_hat.shape) != tuple(eps.shape):
        raise ScheduleError(f"shape mismatch {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return ((eps_hat - eps) ** 2).mean()


def posterior_sigma(t: int, s: NoiseSchedule) -> float:
    if t == 1:
        return 0.0
    var = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t))
    return float(np.sqrt(var))


def ddpm_step(x_t, eps_hat, t: int, s: NoiseSchedule, noise=None):
    """One ancestral step x_t -> x_{t-1}; ``noise`` is ignored at t = 1."""
    beta = s.beta(t)
    ab = s.alpha_bar(t)
    mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(s.alpha(t))
    sigma = posterior_sigma(t, s)
    if sigma == 0.0 or noise is None:
        return mean
    return mean + sigma * noise


def sample(denoise_fn, shape, s: NoiseSchedule, rng: np.random.Generator):
    """Run the full reverse chain from N(0, I) with numpy noise; returns x_0."""
    x = rng.standard_normal(shape)
    for t in range(s.T, 0, -1):
        eps_hat = denoise_fn(x, t)
        noise = rng.standard_normal(shape) if t > 1 else None
        x = ddpm_step(x, eps_hat, t, s, noise)
    return x
