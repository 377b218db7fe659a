"""Small conditional diffusion prior over target embeddings.

Linear-beta DDPM with epsilon prediction. The denoiser is a perceptron on
``[x_t, timestep embedding, b]`` where ``b`` is the brain embedding it is
conditioned on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .losses import softclip_loss
from .numerics import DTYPE, gelu, sinusoidal_embedding

EpsModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @property
    def betas(self) -> torch.Tensor:
        return torch.linspace(self.beta_start, self.beta_end, self.T, dtype=DTYPE)

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> torch.Tensor:
        return torch.cumprod(self.alphas, dim=0)

    def check_t(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if bool(((t < 0) | (t >= self.T)).any()):
            raise ValueError(f"timestep outside [0, {self.T})")
        return t


def noising(x0: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` scalar or one per row."""
    t = schedule.check_t(t)
    abar = schedule.alpha_bars[t]
    if abar.dim() == 1:
        abar = abar[:, None]
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


def predict_x0(x_t: torch.Tensor, t, eps_hat: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    abar = schedule.alpha_bars[schedule.check_t(t)]
    if abar.dim() == 1:
        abar = abar[:, None]
    return (x_t - (1.0 - abar).sqrt() * eps_hat) / abar.sqrt()


class Denoiser(nn.Module):
    """``eps_theta(x_t, t, b)``: three-layer perceptron over the concatenated inputs."""

    def __init__(self, dim: int, cond_dim: int | None = None, hidden: int = 256, t_dim: int = 32,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        cond_dim = dim if cond_dim is None else cond_dim
        self.t_dim = t_dim
        sizes = [dim + t_dim + cond_dim, hidden, hidden, dim]
        self.weights = nn.ParameterList(
            nn.Parameter(torch.from_numpy(rng.standard_normal((a, b)) / np.sqrt(a))) for a, b in zip(sizes, sizes[1:])
        )
        self.biases = nn.ParameterList(nn.Parameter(torch.zeros(b, dtype=DTYPE)) for b in sizes[1:])

    def forward(self, x_t: torch.Tensor, t, b: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
        if t.numel() == 1 and x_t.shape[0] != 1:
            t = t.expand(x_t.shape[0])
        h = torch.cat([x_t, sinusoidal_embedding(t, self.t_dim), b], dim=-1)
        last = len(self.weights) - 1
        for i, (w, bias) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + bias
            if i < last:
                h = gelu(h)
        return h


def draw_noise(rng: np.random.Generator, n: int, dim: int, schedule: DiffusionSchedule):
    t = torch.from_numpy(rng.integers(0, schedule.T, size=n))
    eps = torch.from_numpy(rng.standard_normal((n, dim)))
    return t, eps


def dp_loss(eps_model: EpsModel, x0: torch.Tensor, b: torch.Tensor, rng: np.random.Generator,
            schedule: DiffusionSchedule, t=None, eps=None, return_x0: bool = False):
    """Per-dimension mean squared error of the noise prediction.

    ``t`` (uniform) and ``eps`` (standard normal) are drawn from ``rng``
    unless given. With ``return_x0`` the one-step clean estimate is returned
    too; it is what the prior contrastive term scores during training.
    """
    if t is None or eps is None:
        t_draw, eps_draw = draw_noise(rng, x0.shape[0], x0.shape[1], schedule)
        t = t_draw if t is None else t
        eps = eps_draw if eps is None else eps
    x_t = noising(x0, t, eps, schedule)
    eps_hat = eps_model(x_t, t, b)
    loss = ((eps - eps_hat) ** 2).mean()
    if return_x0:
        return loss, predict_x0(x_t, t, eps_hat, schedule)
    return loss


@torch.no_grad()
def sample_prior(eps_model: EpsModel, b: torch.Tensor, rng: np.random.Generator,
                 schedule: DiffusionSchedule, dim: int | None = None) -> torch.Tensor:
    """Ancestral sampling from ``N(0, I)`` down to ``t = 0``, conditioned on ``b``."""
    b = b[None] if b.dim() == 1 else b
    n, dim = b.shape[0], dim or b.shape[1]
    betas, alphas, abar = schedule.betas, schedule.alphas, schedule.alpha_bars
    x = torch.from_numpy(rng.standard_normal((n, dim)))
    for t in range(schedule.T - 1, -1, -1):
        eps_hat = eps_model(x, torch.full((n,), float(t), dtype=DTYPE), b)
        mean = (x - betas[t] / (1.0 - abar[t]).sqrt() * eps_hat) / alphas[t].sqrt()
        if t > 0:
            var = betas[t] * (1.0 - abar[t - 1]) / (1.0 - abar[t])
            x = mean + var.sqrt() * torch.from_numpy(rng.standard_normal((n, dim)))
        else:
            x = mean
    return x


def prior_clip_loss(c_hat: torch.Tensor, c: torch.Tensor, lambda_prior: float = 1.0, tau: float = 0.125) -> torch.Tensor:
    return softclip_loss(c_hat, c, tau) * lambda_prior


class DiffusionPrior(nn.Module):
    """Schedule plus denoiser, with a standalone fitting loop for the prior alone."""

    def __init__(self, dim: int, cond_dim: int | None = None, schedule: DiffusionSchedule | None = None,
                 hidden: int = 256, rng: np.random.Generator | None = None):
        super().__init__()
        self.dim = dim
        self.schedule = schedule or DiffusionSchedule()
        self.denoiser = Denoiser(dim, cond_dim, hidden=hidden, rng=rng)

    def forward(self, x_t, t, b):
        return self.denoiser(x_t, t, b)

    def loss(self, x0, b, rng, **kw):
        return dp_loss(self.denoiser, x0, b, rng, self.schedule, **kw)

    def sample(self, b, rng):
        return sample_prior(self.denoiser, b, rng, self.schedule, self.dim)

    def fit(self, b: torch.Tensor, c: torch.Tensor, epochs: int = 500, lr: float = 1e-3, batch_size: int = 64,
            rng: np.random.Generator | None = None, lambda_prior: float = 1.0, tau: float = 0.125) -> list[float]:
        """Train the denoiser alone on fixed ``(b, c)`` pairs; returns per-epoch mean loss."""
        rng = rng or np.random.default_rng(0)
        opt = torch.optim.Adam(self.parameters(), lr=lr)
        history = []
        n = len(c)
        for _ in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, batch_size):
                idx = torch.from_numpy(order[start:start + batch_size])
                dp, c_hat = self.loss(c[idx], b[idx], rng, return_x0=True)
                loss = dp + (prior_clip_loss(c_hat, c[idx], lambda_prior, tau) if len(idx) > 1 and lambda_prior else 0.0)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
            history.append(total / n)
        return history
