"""Second-stage toy generator with spatiotemporal routing.

Two banks of brain tokens feed a small pixel-space diffusion model over
16x16 images: the fused first-layer tokens (coarse) and the refined
second-layer tokens (fine). A timestep-conditioned gate mixes the banks,
then the 16 image patch tokens cross-attend to the mixed brain tokens.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import CheckpointError, load_arrays, save_arrays
from .numerics import DTYPE, ShapeError, child_rng, gelu, sinusoidal_embedding
from .prior import DiffusionSchedule, draw_noise, noising

IMAGE_SIZE = 16
PATCH = 4
N_PATCHES = (IMAGE_SIZE // PATCH) ** 2


def _param(rng: np.random.Generator, *shape: int, scale: float | None = None) -> nn.Parameter:
    scale = 1.0 / np.sqrt(shape[0]) if scale is None else scale
    return nn.Parameter(torch.from_numpy(scale * rng.standard_normal(shape)))


class TemporalGate(nn.Module):
    """Timestep -> ``(g_coarse, g_fine)`` on the 2-simplex.

    The logits are a learned affine map of the sinusoidal embedding plus a
    fixed ramp ``bias_scale * (2 t / (T - 1) - 1) * (+1, -1)``. The ramp is
    not trained, so at initialisation the coarse bank dominates at large
    ``t`` (early denoising) and the fine bank at small ``t``.
    """

    def __init__(self, T: int, t_dim: int = 32, bias_scale: float = 2.0, rng: np.random.Generator | None = None):
        super().__init__()
        if T < 1:
            raise ValueError("T must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.T, self.t_dim, self.bias_scale = T, t_dim, bias_scale
        self.weight = _param(rng, t_dim, 2, scale=0.01)
        self.bias = nn.Parameter(torch.zeros(2, dtype=DTYPE))
        self.register_buffer("direction", torch.tensor([1.0, -1.0], dtype=DTYPE))

    def forward(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
        if bool(((t < 0) | (t >= self.T)).any()):
            raise ValueError(f"timestep outside [0, {self.T})")
        ramp = 2.0 * t / max(self.T - 1, 1) - 1.0
        logits = sinusoidal_embedding(t, self.t_dim) @ self.weight + self.bias
        logits = logits + self.bias_scale * ramp[:, None] * self.direction
        return torch.softmax(logits, dim=-1)


def temporal_gate(t, T: int, gate: TemporalGate | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """``(g_coarse, g_fine)`` at timestep(s) ``t``; a fresh gate when none is given."""
    gate = gate if gate is not None else TemporalGate(T)
    if gate.T != T:
        raise ValueError(f"gate was built for T={gate.T}, not {T}")
    g = gate(t)
    return g[:, 0], g[:, 1]


class SpatialRouter(nn.Module):
    """Single-head cross-attention: image tokens query brain tokens."""

    def __init__(self, query_dim: int, key_dim: int, attn_dim: int = 32, value_dim: int | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.query_dim, self.key_dim = query_dim, key_dim
        self.w_q = _param(rng, query_dim, attn_dim)
        self.w_k = _param(rng, key_dim, attn_dim)
        self.w_v = _param(rng, key_dim, value_dim or query_dim)

    def forward(self, z: torch.Tensor, brain: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return spatial_attend(z, brain, self)


def spatial_attend(z: torch.Tensor, brain: torch.Tensor, router: SpatialRouter) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product cross-attention.

    Args:
        z: query tokens ``(N, Q, query_dim)``.
        brain: key/value tokens ``(N, M, key_dim)``.
        router: projection parameters.

    Returns:
        ``(attn @ (brain W_v), attn)`` with ``attn`` of shape ``(N, Q, M)``.
    """
    if z.dim() != 3 or brain.dim() != 3 or z.shape[0] != brain.shape[0]:
        raise ShapeError(f"expected (N, Q, d) and (N, M, d) tokens, got {tuple(z.shape)} and {tuple(brain.shape)}")
    if z.shape[-1] != router.query_dim or brain.shape[-1] != router.key_dim:
        raise ShapeError(f"token widths {z.shape[-1]}/{brain.shape[-1]} do not match "
                         f"the router's {router.query_dim}/{router.key_dim}")
    q = z @ router.w_q
    k = brain @ router.w_k
    scores = q @ k.transpose(1, 2) / np.sqrt(q.shape[-1])
    attn = torch.softmax(scores, dim=-1)
    return attn @ (brain @ router.w_v), attn


# --------------------------------------------------------------------------
# images


def patchify(images: torch.Tensor) -> torch.Tensor:
    """``(N, 16, 16)`` -> ``(N, 16, 16)`` patch tokens (row-major 4x4 patches)."""
    n = images.shape[0]
    g = IMAGE_SIZE // PATCH
    return images.reshape(n, g, PATCH, g, PATCH).permute(0, 1, 3, 2, 4).reshape(n, g * g, PATCH * PATCH)


def unpatchify(tokens: torch.Tensor) -> torch.Tensor:
    n = tokens.shape[0]
    g = IMAGE_SIZE // PATCH
    return tokens.reshape(n, g, g, PATCH, PATCH).permute(0, 1, 3, 2, 4).reshape(n, IMAGE_SIZE, IMAGE_SIZE)


def render_target_image(c_img, seed: int = 0) -> np.ndarray:
    """Deterministic 16x16 image in ``[0, 1]`` for each target embedding.

    A fixed random projection of the embedding weights 16 low-frequency
    cosine patterns; a logistic squashes the sum into the unit interval.
    """
    c = np.atleast_2d(np.asarray(c_img, dtype=np.float64))
    rng = child_rng(seed, 500)
    freqs = [(a, b) for a in range(4) for b in range(4)]
    grid = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
    basis = np.stack([np.outer(np.cos(np.pi * a * grid), np.cos(np.pi * b * grid)) for a, b in freqs])
    proj = rng.standard_normal((c.shape[1], len(freqs))) / np.sqrt(c.shape[1])
    coeff = c @ proj
    images = 1.0 / (1.0 + np.exp(-1.5 * np.tensordot(coeff, basis, axes=1)))
    return images if np.ndim(c_img) > 1 else images[0]


def write_pgm(path, image: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    """Binary 8-bit PGM, mapping ``[lo, hi]`` linearly onto ``[0, 255]``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError("PGM export needs a 2-D array")
    scaled = np.rint((np.clip(image, lo, hi) - lo) / (hi - lo) * 255.0).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    data = raw[len(raw) - width * height:]
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class Stage2Config:
    brain_dim: int = 32
    hidden: int = 64
    attn_dim: int = 32
    t_dim: int = 32
    diffusion_steps: int = 100
    seed: int = 0


class Stage2Model(nn.Module):
    """Epsilon predictor over 16 patch tokens, conditioned on two brain token banks."""

    def __init__(self, config: Stage2Config = Stage2Config()):
        super().__init__()
        self.config = config
        rng = child_rng(config.seed, 600)
        h, pd = config.hidden, PATCH * PATCH
        self.schedule = DiffusionSchedule(T=config.diffusion_steps)
        self.gate = TemporalGate(config.diffusion_steps, config.t_dim, rng=child_rng(config.seed, 601))
        self.spatial = SpatialRouter(h, config.brain_dim, config.attn_dim, h, rng=child_rng(config.seed, 602))
        self.w_in = _param(rng, pd, h)
        self.pos = _param(rng, N_PATCHES, h, scale=0.1)
        self.w_t = _param(rng, config.t_dim, h)
        self.w_mid = _param(rng, h, h)
        self.b_mid = nn.Parameter(torch.zeros(h, dtype=DTYPE))
        self.w_out = _param(rng, h, pd)
        self.b_out = nn.Parameter(torch.zeros(pd, dtype=DTYPE))

    def forward(self, z_t: torch.Tensor, t, coarse: torch.Tensor, fine: torch.Tensor) -> torch.Tensor:
        """``z_t`` ``(N, 16, 16)`` patch tokens -> predicted noise of the same shape."""
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
        if t.numel() == 1 and z_t.shape[0] != 1:
            t = t.expand(z_t.shape[0])
        g = self.gate(t)
        brain = g[:, 0, None, None] * coarse + g[:, 1, None, None] * fine
        temb = sinusoidal_embedding(t, self.config.t_dim) @ self.w_t
        h = z_t @ self.w_in + self.pos + temb[:, None, :]
        ctx, _ = self.spatial(h, brain)
        h = gelu(h + ctx)
        h = gelu(h @ self.w_mid + self.b_mid) + h
        return h @ self.w_out + self.b_out

    def loss(self, images: torch.Tensor, coarse, fine, t, eps) -> torch.Tensor:
        x0 = patchify(images) * 2.0 - 1.0
        z_t = noising(x0.reshape(len(x0), -1), t, eps, self.schedule).reshape(x0.shape)
        eps_hat = self(z_t, t, coarse, fine)
        return ((eps_hat.reshape(len(x0), -1) - eps) ** 2).mean()


def fit_stage2(model: Stage2Model, coarse, fine, images, epochs: int = 200, lr: float = 3e-3,
               batch_size: int = 8, seed: int = 0) -> list[float]:
    """Train on fixed brain-token / image pairs.

    Returns the loss on the whole set after every epoch, evaluated with one
    fixed draw of timesteps and noise so the curve is comparable across
    epochs. Index 0 is the untrained model.
    """
    coarse, fine = torch.as_tensor(coarse, dtype=DTYPE), torch.as_tensor(fine, dtype=DTYPE)
    images = torch.as_tensor(np.asarray(images, dtype=np.float64))
    n, dim = len(images), IMAGE_SIZE * IMAGE_SIZE
    rng = child_rng(seed, 610)
    mon_t, mon_eps = draw_noise(child_rng(seed, 611), n, dim, model.schedule)
    opt = torch.optim.Adam(model.parameters(), lr=lr)

    def monitor() -> float:
        with torch.no_grad():
            return float(model.loss(images, coarse, fine, mon_t, mon_eps))

    history = [monitor()]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = torch.from_numpy(order[lo:lo + batch_size])
            t, eps = draw_noise(rng, len(idx), dim, model.schedule)
            loss = model.loss(images[idx], coarse[idx], fine[idx], t, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append(monitor())
    return history


@torch.no_grad()
def generate_image(model: Stage2Model, coarse, fine, seed: int = 0) -> np.ndarray:
    """Ancestral sampling from pure noise; one ``(16, 16)`` image in ``[0, 1]`` per row."""
    coarse, fine = torch.as_tensor(coarse, dtype=DTYPE), torch.as_tensor(fine, dtype=DTYPE)
    squeeze = coarse.dim() == 2
    if squeeze:
        coarse, fine = coarse[None], fine[None]
    n = coarse.shape[0]
    rng = child_rng(seed, 620)
    s = model.schedule
    betas, alphas, abar = s.betas, s.alphas, s.alpha_bars
    x = torch.from_numpy(rng.standard_normal((n, N_PATCHES, PATCH * PATCH)))
    for t in range(s.T - 1, -1, -1):
        eps_hat = model(x, torch.full((n,), float(t), dtype=DTYPE), coarse, fine)
        x = (x - betas[t] / (1.0 - abar[t]).sqrt() * eps_hat) / alphas[t].sqrt()
        if t > 0:
            var = betas[t] * (1.0 - abar[t - 1]) / (1.0 - abar[t])
            x = x + var.sqrt() * torch.from_numpy(rng.standard_normal(x.shape))
    images = ((unpatchify(x) + 1.0) / 2.0).clamp(0.0, 1.0).numpy()
    return images[0] if squeeze else images


def brain_tokens(encoder, x, modality: str = "image") -> tuple[np.ndarray, np.ndarray]:
    """Coarse (fused first layer) and fine (second layer) tokens from a trained encoder."""
    encoder.eval()
    with torch.no_grad():
        out = encoder(np.asarray(x, dtype=np.float64), modalities=(modality,))
    return out.fused[modality].numpy(), out.refined[modality].numpy()


def save_stage2(path, model: Stage2Model) -> None:
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    save_arrays(path, json.dumps(asdict(model.config)), arrays)


def load_stage2(path) -> Stage2Model:
    if not Path(path).exists():
        raise CheckpointError(f"stage-2 checkpoint {path} does not exist")
    text, arrays = load_arrays(path)
    try:
        model = Stage2Model(Stage2Config(**json.loads(text)))
        model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()}, strict=True)
    except (ValueError, TypeError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: not a stage-2 checkpoint: {exc}") from exc
    model.eval()
    return model
