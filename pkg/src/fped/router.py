"""Prior-guided first-layer routing.

Feature-wise logits, softmax probabilities, the one-hot network prior, the
scheduled KL regulariser, expert capacity and expert-wise top-K dispatch.
Batched tensors put the batch first: ``x`` is ``(N, L)``, probabilities are
``(N, L, E)`` and dispatch outputs are ``(N, E, L)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, ShapeError, softmax_last

N_EXPERTS = 7
PROB_FLOOR = 1e-12


def compute_logits(x: torch.Tensor, w_r: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``Z_i = x_i * W_r + B_i`` for every position ``i``.

    ``x`` is ``(L,)`` or ``(N, L)``; ``w_r`` is ``(E,)``; ``bias`` ``(L, E)``.
    """
    if w_r.dim() != 1:
        raise ShapeError("w_r must be a vector over experts")
    z = x[..., None] * w_r
    if bias is not None:
        if bias.shape != (x.shape[-1], w_r.shape[0]):
            raise ShapeError(f"bias shape {tuple(bias.shape)} != {(x.shape[-1], w_r.shape[0])}")
        z = z + bias
    return z


def routing_probs(z: torch.Tensor) -> torch.Tensor:
    return softmax_last(z)


def build_prior(labels, n_experts: int = N_EXPERTS) -> torch.Tensor:
    """One-hot prior rows from 1-based network labels, shape ``labels.shape + (E,)``."""
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if lab.numel() and (lab.min() < 1 or lab.max() > n_experts):
        raise ValueError(f"labels must lie in 1..{n_experts}")
    return nn.functional.one_hot(lab - 1, n_experts).to(DTYPE)


def kl_penalty(prior: torch.Tensor, probs: torch.Tensor, weight: float = 1.0, reduction: str = "mean") -> torch.Tensor:
    """``weight * agg_i KL(prior_i || probs_i)`` with ``0 log 0 = 0``.

    For a one-hot prior each row reduces to ``-log probs[i, roi(i)]``.
    Probabilities are floored at 1e-12; hitting the floor on a prior slot
    raises instead of quietly returning a huge number.
    """
    if prior.shape[-1] != probs.shape[-1]:
        raise ShapeError("prior and probs disagree on the expert axis")
    if weight == 0:
        return probs.sum() * 0.0
    one_hot = bool(((prior == 0) | (prior == 1)).all() and (prior.sum(-1) == 1).all())
    if one_hot:
        roi = prior.argmax(-1).expand(probs.shape[:-1])
        slot = probs.gather(-1, roi[..., None])[..., 0]
        if bool((slot.detach() < PROB_FLOOR).any()):
            raise FloatingPointError("routing probability underflow at a prior slot")
        rows = -torch.log(slot)
    else:
        support = (prior > 0).expand_as(probs)
        if bool((probs.detach()[support] < PROB_FLOOR).any()):
            raise FloatingPointError("routing probability underflow at a prior slot")
        safe_p = torch.where(support, prior.expand_as(probs), torch.ones_like(probs))
        log_q = torch.log(probs.clamp_min(PROB_FLOOR))
        rows = torch.where(support, safe_p * (torch.log(safe_p) - log_q), torch.zeros_like(log_q)).sum(-1)
    agg = rows.mean() if reduction == "mean" else rows.sum()
    if not torch.isfinite(agg):
        raise FloatingPointError("non-finite KL penalty")
    return weight * agg


@dataclass(frozen=True)
class KlSchedule:
    """Piecewise-linear KL weight: ramp up, plateau, linear decay, floor."""

    epochs_ramp: float
    epochs_plateau: float
    epochs_decay: float
    w_max: float = 10.0
    w_min: float = 0.1

    @classmethod
    def from_fractions(cls, total_epochs: int, ramp=0.2, plateau=0.5, decay=0.3, w_max=10.0, w_min=0.1):
        return cls(ramp * total_epochs, plateau * total_epochs, decay * total_epochs, w_max, w_min)

    @classmethod
    def constant(cls, w: float):
        return cls(0.0, math.inf, 0.0, w, w)


def kl_weight(t: float, s: KlSchedule) -> float:
    if t < 0:
        raise ValueError("epoch must be >= 0")
    if t < s.epochs_ramp:
        return s.w_max * t / s.epochs_ramp
    t -= s.epochs_ramp
    if t <= s.epochs_plateau:
        return s.w_max
    t -= s.epochs_plateau
    if t < s.epochs_decay:
        return s.w_max + (s.w_min - s.w_max) * t / s.epochs_decay
    return s.w_min


def expert_capacity(L: int, cf: float, E: int) -> int:
    """Per-expert capacity ``ceil(L * CF / E)``."""
    if L < 1 or E < 1:
        raise ValueError("L and E must be >= 1")
    if not 0 < cf <= 2:
        raise ValueError(f"capacity factor {cf} outside (0, 2]")
    # exact rational ceiling, immune to float rounding of L * cf
    num, den = float(cf).as_integer_ratio()
    return -(-(L * num) // (den * E))


def topk_positions(scores: np.ndarray, k: int) -> np.ndarray:
    """Mask of the ``k`` largest entries along the last axis, ties to lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[-1]
    if k >= n:
        return np.ones(scores.shape, dtype=bool)
    thr = np.partition(scores, n - k, axis=-1)[..., n - k:n - k + 1]
    at_least = scores >= thr
    if (at_least.sum(axis=-1) == k).all():
        return at_least
    above = scores > thr
    tied = scores == thr
    need = k - above.sum(axis=-1, keepdims=True)
    return above | (tied & (np.cumsum(tied, axis=-1) <= need))


@dataclass
class Dispatch:
    masks: torch.Tensor  # (N, E, L) bool
    weights: torch.Tensor  # (N, E, L), zero off-mask
    routed: torch.Tensor  # (N, E, L)
    capacity: int


def dispatch(x: torch.Tensor, probs: torch.Tensor, capacity: int) -> Dispatch:
    """Expert-wise top-K selection and weighting.

    Expert ``k`` takes the ``capacity`` positions with the largest
    ``probs[..., k]``; ``routed[k] = w_k * (m_k * x)`` with ``w_k`` the
    probabilities on the selected positions. Gradients reach the router
    through ``w_k``; the selection itself is piecewise constant.
    """
    squeeze = x.dim() == 1
    if squeeze:
        x, probs = x[None], probs[None]
    L = x.shape[-1]
    if probs.shape[:2] != x.shape:
        raise ShapeError(f"probs {tuple(probs.shape)} do not match x {tuple(x.shape)}")
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    if capacity > L:
        warnings.warn(f"capacity {capacity} > {L}; clamped", RuntimeWarning, stacklevel=2)
        capacity = L
    # expert-major (E, N, L) storage; the (N, E, L) results are views of it
    p_en = probs.permute(2, 0, 1).contiguous()
    mask_en = torch.from_numpy(topk_positions(p_en.detach().numpy(), capacity))
    weights_en = p_en * mask_en
    routed_en = p_en * (mask_en * x[None])
    out = Dispatch(mask_en.transpose(0, 1), weights_en.transpose(0, 1), routed_en.transpose(0, 1), capacity)
    if squeeze:
        return Dispatch(out.masks[0], out.weights[0], out.routed[0], capacity)
    return out


@dataclass
class RoutingState:
    logits: torch.Tensor
    probs: torch.Tensor
    prior: torch.Tensor
    masks: torch.Tensor
    weights: torch.Tensor
    routed: torch.Tensor
    capacity: int

    def prior_adherence(self) -> float:
        """Fraction of positions whose most probable expert is the prior's."""
        return float((self.probs.argmax(-1) == self.prior.argmax(-1)).double().mean())

    def prior_slot_prob(self) -> float:
        return float((self.probs * self.prior).sum(-1).mean())

    def load(self) -> np.ndarray:
        """Routing mass per expert, summed over selected positions and batch."""
        return self.weights.detach().sum(dim=(0, 2)).numpy()


class Router(nn.Module):
    """Learnable router: shared ``W_r`` plus an optional per-position bias.

    Without the bias (``position_bias=False``) the logits are the literal
    ``x_i W_r`` form, which cannot express a position-dependent prior.
    """

    def __init__(self, n_features: int, n_experts: int = N_EXPERTS, cf: float = 1.0,
                 position_bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_features = n_features
        self.n_experts = n_experts
        self.capacity = expert_capacity(n_features, cf, n_experts)
        self.w_r = nn.Parameter(torch.from_numpy(0.01 * rng.standard_normal(n_experts)))
        self.bias = nn.Parameter(torch.zeros(n_features, n_experts, dtype=DTYPE)) if position_bias else None

    def forward(self, x: torch.Tensor, prior: torch.Tensor) -> RoutingState:
        # logits built expert-major so softmax, top-K and the expert matmul avoid copies
        z_en = self.w_r[:, None, None] * x[None]
        if self.bias is not None:
            z_en = z_en + self.bias.T[:, None, :]
        p_en = torch.softmax(z_en, dim=0)
        d = dispatch(x, p_en.permute(1, 2, 0), self.capacity)
        return RoutingState(z_en.permute(1, 2, 0), p_en.permute(1, 2, 0), prior, d.masks, d.weights,
                            d.routed, d.capacity)
