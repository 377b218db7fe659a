"""The full encoder: routing, expert layers, heads and the diffusion prior."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .experts import (AttentionFusion, ExpertBank, PoolProject, SecondLayer, count_params, fuse_l1,
                      matched_transformer)
from .numerics import DTYPE, child_rng
from .prior import DiffusionPrior, DiffusionSchedule
from .router import N_EXPERTS, Router, RoutingState, build_prior, expert_capacity

MODES = ("moe", "onlyv", "uniform", "attention", "transformer")
MODALITIES = ("text", "image")
ROUTED_MODES = ("moe", "onlyv")


@dataclass
class Forward:
    embeddings: dict = field(default_factory=dict)
    routing: dict = field(default_factory=dict)
    expert_features: dict = field(default_factory=dict)
    fused: dict = field(default_factory=dict)
    refined: dict = field(default_factory=dict)
    gate: dict = field(default_factory=dict)


class FPEDNet(nn.Module):
    """Prior-guided hierarchical mixture-of-experts encoder.

    In the routed modes each alignment head has its own router (unless
    ``shared_router``); the expert layers and pooling trunk are shared, so
    the text and image embeddings come from two forward passes that differ
    only in routing. The other modes are ablations: ``uniform`` feeds
    every expert ``x / 7``, ``attention`` feeds every expert ``x`` and fuses
    by softmax attention, ``transformer`` swaps the first-layer bank for a
    self-attention encoder of about the same size, and ``onlyv`` zeroes
    every non-visual position before routing.
    """

    def __init__(self, network_labels, dim: int = 64, *, mode: str = "moe", cf: float = 1.0,
                 tokens: int = 8, width: int = 32, hidden: int = 64, l2_experts: int = 14,
                 l2_hidden: int = 64, l2_top_k: int = 2, position_bias: bool = True,
                 shared_router: bool = False, prior_hidden: int = 256, diffusion_steps: int = 100,
                 seed: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        labels = np.asarray(network_labels, dtype=np.int64)
        n_features = len(labels)
        self.mode, self.dim, self.n_features = mode, dim, n_features
        self.shared_router = shared_router
        self.register_buffer("labels", torch.from_numpy(labels))
        self.register_buffer("prior_onehot", build_prior(labels))
        self.register_buffer("x_mean", torch.zeros(n_features, dtype=DTYPE))
        self.register_buffer("x_scale", torch.ones(n_features, dtype=DTYPE))

        rng = child_rng(seed, 100)
        if mode in ROUTED_MODES:
            names = ("shared",) if shared_router else MODALITIES
            self.routers = nn.ModuleDict({
                name: Router(n_features, N_EXPERTS, cf, position_bias, rng=child_rng(seed, 101, i))
                for i, name in enumerate(names)
            })
        else:
            self.routers = nn.ModuleDict()
        self.bank = ExpertBank(n_features, N_EXPERTS, hidden, tokens, width, rng=rng)
        if mode == "transformer":
            target = count_params(self.bank)
            self.transformer = matched_transformer(n_features, target, tokens, width, rng=child_rng(seed, 102))
            del self.bank
        if mode == "attention":
            self.attention = AttentionFusion(width, rng=child_rng(seed, 103))
        self.layer2 = SecondLayer(width, l2_experts, l2_hidden, l2_top_k, rng=child_rng(seed, 104))
        self.heads = PoolProject(width, dim, rng=child_rng(seed, 105))
        self.prior = DiffusionPrior(dim, dim, DiffusionSchedule(T=diffusion_steps), hidden=prior_hidden,
                                    rng=child_rng(seed, 106))

    # ------------------------------------------------------------------
    def set_standardization(self, mean: np.ndarray, scale: np.ndarray) -> None:
        with torch.no_grad():
            self.x_mean.copy_(torch.as_tensor(mean, dtype=DTYPE))
            self.x_scale.copy_(torch.as_tensor(np.where(scale > 0, scale, 1.0), dtype=DTYPE))

    def prepare(self, x) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(x, dtype=np.float64)) if not isinstance(x, torch.Tensor) else x
        x = (x - self.x_mean) / self.x_scale
        if self.mode == "onlyv":
            x = x * (self.labels == 1)
        return x

    def encoder_size(self) -> int:
        """Parameter count of the first-layer feature extractor."""
        return count_params(self.transformer if self.mode == "transformer" else self.bank)

    def _branch(self, out: Forward, key: str, h: torch.Tensor, feats) -> None:
        out.fused[key] = h
        out.expert_features[key] = feats
        out.refined[key], out.gate[key] = self.layer2(h)

    def forward(self, x, modalities=MODALITIES) -> Forward:
        """``x`` raw ``(N, L)`` features -> embeddings and routing diagnostics."""
        x = self.prepare(x)
        out = Forward()
        if self.mode in ROUTED_MODES:
            for modality in modalities:
                key = "shared" if self.shared_router else modality
                if key not in out.fused:
                    state: RoutingState = self.routers[key](x, self.prior_onehot)
                    feats = self.bank(state.routed)
                    out.routing[key] = state
                    self._branch(out, key, fuse_l1(feats), feats)
                out.embeddings[modality] = self.heads(out.refined[key], modality)
                if key != modality:
                    for d in (out.routing, out.fused, out.refined, out.gate, out.expert_features):
                        d[modality] = d[key]
            return out
        if self.mode == "transformer":
            self._branch(out, "shared", self.transformer(x), None)
        else:
            dense = x[:, None, :].expand(-1, N_EXPERTS, -1)
            if self.mode == "uniform":
                feats = self.bank(dense / N_EXPERTS)
                h = fuse_l1(feats)
            else:
                feats = self.bank(dense)
                h = self.attention(feats)
            self._branch(out, "shared", h, feats)
        for modality in modalities:
            out.embeddings[modality] = self.heads(out.refined["shared"], modality)
            for d in (out.fused, out.refined, out.gate, out.expert_features):
                d[modality] = d["shared"]
        return out

    @torch.no_grad()
    def predict(self, x, batch_size: int = 128) -> dict:
        x = np.asarray(x, dtype=np.float64)
        parts = {m: [] for m in MODALITIES}
        for start in range(0, len(x), batch_size):
            out = self(x[start:start + batch_size])
            for m in MODALITIES:
                parts[m].append(out.embeddings[m].numpy())
        return {m: np.concatenate(v) for m, v in parts.items()}
