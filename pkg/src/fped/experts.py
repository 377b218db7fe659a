"""Expert networks, summation fusion, the data-driven second layer and heads."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, ShapeError, gelu, softmax_last
from .router import topk_positions


def _init(rng: np.random.Generator, shape, fan_in: int) -> nn.Parameter:
    return nn.Parameter(torch.from_numpy(rng.standard_normal(shape) / np.sqrt(fan_in)))


def _zeros(*shape) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=DTYPE))


def expert_forward_l1(q: torch.Tensor, w1, b1, w2, b2, tokens: int) -> torch.Tensor:
    """One first-layer expert: ``gelu(q W1 + b1) W2 + b2`` reshaped to ``(..., G, d)``."""
    hidden = gelu(q @ w1 + b1)
    out = hidden @ w2 + b2
    return out.reshape(*out.shape[:-1], tokens, out.shape[-1] // tokens)


class ExpertBank(nn.Module):
    """``E`` two-layer perceptrons ``R^L -> R^{G x d}``, evaluated as one batched matmul."""

    def __init__(self, n_features: int, n_experts: int = 7, hidden: int = 64, tokens: int = 8,
                 width: int = 32, rng: np.random.Generator | None = None, fan_in: int | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_experts, self.tokens, self.width = n_experts, tokens, width
        self.w1 = _init(rng, (n_experts, n_features, hidden), fan_in or n_features)
        self.b1 = _zeros(n_experts, 1, hidden)
        self.w2 = _init(rng, (n_experts, hidden, tokens * width), hidden)
        self.b2 = _zeros(n_experts, 1, tokens * width)

    def forward(self, routed: torch.Tensor) -> torch.Tensor:
        """``routed`` ``(N, E, L)`` -> expert features ``(N, E, G, d)``."""
        if routed.dim() != 3 or routed.shape[1] != self.n_experts:
            raise ShapeError(f"expected (N, {self.n_experts}, L), got {tuple(routed.shape)}")
        per_expert = routed.transpose(0, 1)  # (E, N, L)
        hidden = gelu(torch.bmm(per_expert, self.w1) + self.b1)
        out = torch.bmm(hidden, self.w2) + self.b2  # (E, N, G*d)
        n = routed.shape[0]
        return out.transpose(0, 1).reshape(n, self.n_experts, self.tokens, self.width)

    def expert(self, k: int, q: torch.Tensor) -> torch.Tensor:
        return expert_forward_l1(q, self.w1[k], self.b1[k, 0], self.w2[k], self.b2[k, 0], self.tokens)


def fuse_l1(features) -> torch.Tensor:
    """Sum expert outputs. Accepts a sequence of equal-shape tensors or ``(N, E, G, d)``."""
    if isinstance(features, torch.Tensor):
        return features.sum(dim=1)
    features = list(features)
    shape = features[0].shape
    if any(f.shape != shape for f in features):
        raise ShapeError("all expert outputs must share one shape")
    return torch.stack(features).sum(dim=0)


class SecondLayer(nn.Module):
    """Fourteen token-wise perceptrons behind a dense softmax gate with top-k selection.

    The gate reads the token-mean of the fused features. Selected gate
    probabilities are renormalised over the chosen experts; unselected ones
    get weight zero. All experts are evaluated and the zero weights mask
    them, which gives the same output and gradients as sparse evaluation.
    """

    def __init__(self, width: int = 32, n_experts: int = 14, hidden: int = 64, top_k: int = 2,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_experts, self.top_k = n_experts, top_k
        self.gate_w = _init(rng, (width, n_experts), width)
        self.gate_b = _zeros(n_experts)
        self.w1 = _init(rng, (n_experts, width, hidden), width)
        self.b1 = _zeros(n_experts, hidden)
        self.w2 = _init(rng, (n_experts, hidden, width), hidden)
        self.b2 = _zeros(n_experts, width)

    def gate_logits(self, h: torch.Tensor) -> torch.Tensor:
        return h.mean(dim=1) @ self.gate_w + self.gate_b

    def expert_outputs(self, h: torch.Tensor) -> torch.Tensor:
        """``(N, G, d)`` -> ``(N, 14, G, d)``."""
        hidden = gelu(torch.einsum("ngd,edh->negh", h, self.w1) + self.b1[None, :, None, :])
        return torch.einsum("negh,ehd->negd", hidden, self.w2) + self.b2[None, :, None, :]

    def mix(self, logits: torch.Tensor, outputs: torch.Tensor, top_k: int | None = None):
        top_k = self.top_k if top_k is None else top_k
        keep = torch.from_numpy(topk_positions(logits.detach().numpy(), top_k))
        # renormalised top-k of a softmax is a softmax over the kept logits;
        # dropped logits then never enter the graph
        weights = softmax_last(logits.masked_fill(~keep, float("-inf")))
        return torch.einsum("ne,negd->ngd", weights, outputs), weights

    def forward(self, h: torch.Tensor, top_k: int | None = None):
        """Return ``(H', renormalised gate weights (N, 14))``."""
        if not torch.isfinite(h).all():
            raise FloatingPointError("non-finite input to the second layer")
        return self.mix(self.gate_logits(h), self.expert_outputs(h), top_k)


class PoolProject(nn.Module):
    """Token-mean pooling followed by separate text and image projections."""

    def __init__(self, width: int = 32, dim: int = 64, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.text_w = _init(rng, (width, dim), width)
        self.text_b = _zeros(dim)
        self.image_w = _init(rng, (width, dim), width)
        self.image_b = _zeros(dim)

    @staticmethod
    def pool(h: torch.Tensor) -> torch.Tensor:
        return h.mean(dim=-2)

    def project(self, pooled: torch.Tensor, modality: str) -> torch.Tensor:
        if modality == "text":
            return pooled @ self.text_w + self.text_b
        if modality == "image":
            return pooled @ self.image_w + self.image_b
        raise ValueError(f"unknown modality {modality!r}")

    def forward(self, h: torch.Tensor, modality: str) -> torch.Tensor:
        return self.project(self.pool(h), modality)


class AttentionFusion(nn.Module):
    """Softmax attention over expert outputs (ablation replacement for summation)."""

    def __init__(self, width: int = 32, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.query = _init(rng, (width,), width)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        keys = features.mean(dim=2)  # (N, E, d)
        scores = keys @ self.query / np.sqrt(features.shape[-1])
        attn = softmax_last(scores)
        return torch.einsum("ne,negd->ngd", attn, features)


class TokenTransformer(nn.Module):
    """Self-attention encoder ``R^L -> R^{G x d}`` used by the transformer ablation.

    The input is cut into ``n_tokens`` chunks, embedded, passed through
    ``layers`` encoder blocks and mean-pooled into ``G`` output tokens.
    """

    def __init__(self, n_features: int, tokens: int = 8, width: int = 32, model_dim: int = 128,
                 ff_dim: int = 512, layers: int = 2, heads: int = 4, n_tokens: int = 64,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if n_features % n_tokens or n_tokens % tokens:
            raise ShapeError("n_features must split into n_tokens chunks, n_tokens into G groups")
        self.tokens, self.width, self.n_tokens = tokens, width, n_tokens
        chunk = n_features // n_tokens
        self.embed = nn.Linear(chunk, model_dim, dtype=DTYPE)
        self.pos = nn.Parameter(torch.zeros(n_tokens, model_dim, dtype=DTYPE))
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(model_dim, heads, ff_dim, dropout=0.0, activation="gelu",
                                       batch_first=True, dtype=DTYPE)
            for _ in range(layers)
        )
        self.out = nn.Linear(model_dim, width, dtype=DTYPE)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif p.dim() >= 2 and name != "pos":
                    p.copy_(torch.from_numpy(rng.standard_normal(tuple(p.shape)) / np.sqrt(p.shape[-1])))
                else:
                    p.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        h = self.embed(x.reshape(n, self.n_tokens, -1)) + self.pos
        for block in self.blocks:
            h = block(h)
        h = h.reshape(n, self.tokens, self.n_tokens // self.tokens, -1).mean(dim=2)
        return self.out(h)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def matched_transformer(n_features: int, target: int, tokens: int = 8, width: int = 32,
                        model_dim: int = 128, layers: int = 2, n_tokens: int = 8, rng=None) -> TokenTransformer:
    """Transformer whose feed-forward width is solved so its size matches ``target``."""
    probe = TokenTransformer(n_features, tokens, width, model_dim, ff_dim=1, layers=layers, n_tokens=n_tokens)
    base = count_params(probe) - layers * (2 * model_dim + 1)
    per_ff = layers * (2 * model_dim + 1)
    ff = max(model_dim, int(round((target - base) / per_ff)))
    return TokenTransformer(n_features, tokens, width, model_dim, ff_dim=ff, layers=layers, n_tokens=n_tokens,
                            rng=rng)
