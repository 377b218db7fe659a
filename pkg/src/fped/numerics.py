"""Dense float64 tensor helpers, a gradient oracle and the package PRNG.

Tensors are ``torch.Tensor`` objects in float64; torch autograd is the
reverse-mode tape. Everything here is small on purpose: the rest of the
package composes these pieces and checks them with :func:`grad_check`.
"""

from __future__ import annotations

import math
from typing import Callable, Dict

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64


class ShapeError(ValueError):
    """Raised when a tensor does not have the rank or extent an op needs."""


def as_tensor(values, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def seeded_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator seeded with ``seed``.

    PCG64 with numpy's SeedSequence expansion is a fixed algorithm, so the
    stream for a given seed is the same on every platform.
    """
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent stream for a named sub-task, e.g. ``child_rng(seed, 3)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, path)])
    return np.random.Generator(np.random.PCG64(ss))


def softmax_rows(m: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of a rank-2 tensor, max-subtracted."""
    if m.dim() != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 tensor, got shape {tuple(m.shape)}")
    return softmax_last(m)


def softmax_last(m: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # torch's kernel subtracts the row max before exponentiating
    return torch.softmax(m, dim=dim)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard transformer-style timestep embedding, shape ``(len(t), dim)``."""
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(len(t), 1, dtype=DTYPE)], dim=-1)
    return emb


# Differentiable primitives the rest of the package is built from.  The
# test-suite runs grad_check over every entry.
PRIMITIVES: Dict[str, Callable[..., torch.Tensor]] = {
    "softmax_rows": softmax_rows,
    "gelu": gelu,
    "linear": linear,
    "l2_normalize": l2_normalize,
    "log": torch.log,
    "exp": torch.exp,
    "sqrt": torch.sqrt,
    "matmul": torch.matmul,
    "mean": torch.mean,
    "sum": torch.sum,
}


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], theta: torch.Tensor, h: float = 1e-5) -> float:
    """Compare autograd against central differences.

    Args:
        f: scalar-valued function of a single tensor.
        theta: point to check at. Not modified.
        h: finite-difference step, in ``[1e-6, 1e-4]``.

    Returns:
        ``max_i |analytic_i - fd_i| / (|fd_i| + 1e-8)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    base = theta.detach().clone().to(DTYPE)
    x = base.clone().requires_grad_(True)
    value = f(x)
    if value.numel() != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not torch.isfinite(value).all():
        raise FloatingPointError("f(theta) is not finite")
    (analytic,) = torch.autograd.grad(value, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(base)
    analytic = analytic.detach().reshape(-1)

    flat = base.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            plus = flat.clone()
            plus[i] += h
            minus = flat.clone()
            minus[i] -= h
            fp = f(plus.reshape(base.shape))
            fm = f(minus.reshape(base.shape))
            numeric[i] = (fp - fm) / (2.0 * h)
    if not torch.isfinite(numeric).all():
        raise FloatingPointError("finite differences produced a non-finite value")
    rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8)
    return float(rel.max())
