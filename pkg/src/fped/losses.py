"""Alignment objectives: cosine, MSE, SoftCLIP and the summed total."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch

from .numerics import l2_normalize

EPS = 1e-12
TERMS = ("kl", "cos", "mse", "softclip", "dp", "prior_clip")


def _batch(x: torch.Tensor) -> torch.Tensor:
    return x[None] if x.dim() == 1 else x


def cosine_loss(b: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``1 - cos(b, c)``. Zero-norm rows raise."""
    b, c = _batch(b), _batch(c)
    if b.shape != c.shape:
        raise ValueError(f"shape mismatch {tuple(b.shape)} vs {tuple(c.shape)}")
    nb, nc = b.norm(dim=-1), c.norm(dim=-1)
    if bool((nb.detach() == 0).any() or (nc.detach() == 0).any()):
        raise FloatingPointError("cosine loss of a zero-norm vector")
    cos = (b * c).sum(-1) / (nb.clamp_min(EPS) * nc.clamp_min(EPS))
    return (1.0 - cos).mean()


def mse_loss(b: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Mean over dimensions of squared error, then batch mean."""
    b, c = _batch(b), _batch(c)
    if b.shape != c.shape:
        raise ValueError(f"shape mismatch {tuple(b.shape)} vs {tuple(c.shape)}")
    return ((b - c) ** 2).mean(-1).mean()


def soft_targets(c: torch.Tensor, tau: float) -> torch.Tensor:
    c = l2_normalize(_batch(c))
    return torch.softmax(c @ c.T / tau, dim=-1)


def softclip_loss(b: torch.Tensor, c: torch.Tensor, tau: float = 0.125, bidirectional: bool = True) -> torch.Tensor:
    """Soft-target contrastive loss between predictions ``b`` and targets ``c``.

    Targets ``softmax_j(c_i . c_j / tau)`` score both the row-wise
    predictions ``softmax_j(b_i . c_j / tau)`` and, when bidirectional, the
    transposed ones ``softmax_j(c_i . b_j / tau)``; the two cross-entropies
    are averaged. Rows are L2-normalised first; the sum over ``i`` is a
    batch mean.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    b, c = l2_normalize(_batch(b)), l2_normalize(_batch(c))
    targets = torch.softmax(c @ c.T / tau, dim=-1)
    logits = b @ c.T / tau
    forward = -(targets * torch.log_softmax(logits, dim=-1)).sum(-1).mean()
    if not bidirectional:
        return forward
    backward = -(targets * torch.log_softmax(logits.T, dim=-1)).sum(-1).mean()
    return 0.5 * (forward + backward)


def target_entropy(c: torch.Tensor, tau: float) -> torch.Tensor:
    t = soft_targets(c, tau)
    return -(t * torch.log(t.clamp_min(1e-300))).sum(-1).mean()


@dataclass
class LossBreakdown:
    kl: float = 0.0
    cos: float = 0.0
    mse: float = 0.0
    softclip: float = 0.0
    dp: float = 0.0
    prior_clip: float = 0.0
    total: float = 0.0
    epoch: int = 0
    batch: int = 0

    def as_row(self) -> dict:
        return asdict(self)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def total_loss(parts: dict, weights: dict | None = None) -> torch.Tensor:
    """Weighted sum of loss terms; every weight defaults to 1."""
    weights = weights or {}
    total = None
    for name, value in parts.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise FloatingPointError(f"loss term {name!r} is not finite ({v})")
        term = weights.get(name, 1.0) * value
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total if isinstance(total, torch.Tensor) else torch.tensor(float(total), dtype=torch.float64)
