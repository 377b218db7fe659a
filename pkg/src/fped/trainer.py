"""Stage-one optimisation loop, evaluation, ablations and checkpoint I/O."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_arrays, save_arrays
from .config import TrainConfig, parse_config_text
from .datagen import Dataset, FeatureAssembler
from .losses import LossBreakdown, cosine_loss, mse_loss, softclip_loss, total_loss
from .metrics import embedding_metrics
from .model import MODALITIES, FPEDNet
from .numerics import DTYPE, child_rng
from .prior import draw_noise, dp_loss, prior_clip_loss
from .router import KlSchedule, kl_penalty, kl_weight

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when the loss diverges or turns non-finite."""


@dataclass
class TrainResult:
    model: FPEDNet
    config: TrainConfig
    assembler: FeatureAssembler | None = None
    history: list = field(default_factory=list)  # LossBreakdown per training batch
    monitor: list = field(default_factory=list)  # LossBreakdown per epoch on a fixed batch
    router_log: list = field(default_factory=list)
    seconds: float = 0.0


def kl_schedule(config: TrainConfig) -> KlSchedule:
    if config.kl_schedule == "constant":
        return KlSchedule.constant(config.kl_w_max)
    return KlSchedule.from_fractions(config.epochs, config.kl_ramp, config.kl_plateau, config.kl_decay,
                                     config.kl_w_max, config.kl_w_min)


def build_model(config: TrainConfig, network_labels, dim: int) -> FPEDNet:
    return FPEDNet(
        network_labels, dim, mode=config.mode, cf=config.cf, tokens=config.tokens,
        width=config.width, hidden=config.hidden, l2_experts=config.l2_experts, l2_hidden=config.l2_hidden,
        l2_top_k=config.l2_top_k, position_bias=config.position_bias, shared_router=config.shared_router,
        prior_hidden=config.prior_hidden, diffusion_steps=config.diffusion_steps, seed=config.seed,
    )


def batch_losses(model: FPEDNet, x, text, image, w_kl: float, config: TrainConfig, rng=None, t=None, eps=None):
    """Forward pass plus every loss term; returns ``(parts, total, forward)``."""
    out = model(x)
    targets = {"text": text, "image": image}
    zero = torch.zeros((), dtype=DTYPE)
    states = {id(s): s for s in out.routing.values()}.values()
    kls = [kl_penalty(model.prior_onehot, s.probs, w_kl, config.kl_reduction) for s in states]
    parts = {"kl": sum(kls) / len(kls) if kls else zero}
    parts["cos"] = sum(cosine_loss(out.embeddings[m], targets[m]) for m in MODALITIES) / 2
    parts["mse"] = sum(mse_loss(out.embeddings[m], targets[m]) for m in MODALITIES) / 2
    parts["softclip"] = sum(softclip_loss(out.embeddings[m], targets[m], config.tau, config.bidirectional)
                            for m in MODALITIES) / 2
    target = targets[config.prior_target]
    dp, c_hat = dp_loss(model.prior.denoiser, target, out.embeddings[config.prior_target], rng,
                        model.prior.schedule, t=t, eps=eps, return_x0=True)
    parts["dp"] = dp
    parts["prior_clip"] = prior_clip_loss(c_hat, target, config.lambda_prior, config.tau)
    total = total_loss(parts, config.loss_weights())
    return parts, total, out


def _breakdown(parts, total, epoch, batch) -> LossBreakdown:
    vals = {k: float(v.detach()) for k, v in parts.items()}
    return LossBreakdown(**vals, total=float(total.detach()), epoch=epoch, batch=batch)


def _router_rows(out, model: FPEDNet, epoch: int, w: float) -> list[dict]:
    rows = []
    for key, state in out.routing.items():
        if key == "shared" and len(out.routing) > 1 and not model.shared_router:
            continue
        if model.shared_router and key != "shared":
            continue
        with torch.no_grad():
            p_slot = (state.probs * state.prior).sum(-1)
            kl = float(-torch.log(p_slot.clamp_min(1e-12)).mean())
        mass = state.weights.detach().sum(dim=2).mean(dim=0).numpy()
        counts = state.masks.sum(dim=2).double().mean(dim=0).numpy()
        row = {"epoch": epoch, "router": key, "w_kl": w, "kl": kl,
               "prior_slot_prob": float(p_slot.mean()), "adherence": state.prior_adherence()}
        row.update({f"load_{k + 1}": float(counts[k]) for k in range(len(counts))})
        row.update({f"mass_{k + 1}": float(mass[k]) for k in range(len(mass))})
        rows.append(row)
    return rows


def fit_network(config: TrainConfig, X, network_labels, text, image, *, progress: bool = False,
                callback=None) -> TrainResult:
    """Train the encoder and diffusion prior on assembled features ``X``.

    ``callback(epoch, model)``, when given, runs after every epoch's monitor pass.
    """
    config = config.validate()
    X = np.asarray(X, dtype=np.float64)
    text = torch.as_tensor(np.asarray(text, dtype=np.float64))
    image = torch.as_tensor(np.asarray(image, dtype=np.float64))
    if not (len(X) == len(text) == len(image)):
        raise ValueError("X, text and image must have the same number of rows")
    model = build_model(config, network_labels, text.shape[1])
    if len(X) > 1:
        # a single row would standardise to all zeros
        model.set_standardization(X.mean(axis=0), X.std(axis=0))
    router_params = list(model.routers.parameters())
    routed = {id(p) for p in router_params}
    groups = [{"params": [p for p in model.parameters() if id(p) not in routed]}]
    if router_params:
        groups.append({"params": router_params, "lr": config.lr * config.router_lr_scale})
    opt = torch.optim.Adam(groups, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.adam_eps)
    schedule = kl_schedule(config)
    rng = child_rng(config.seed, 10)
    n = len(X)
    monitor_idx = np.arange(min(n, config.monitor_size))
    mon_t, mon_eps = draw_noise(child_rng(config.seed, 20), len(monitor_idx), image.shape[1], model.prior.schedule)
    Xt = torch.from_numpy(X)
    result = TrainResult(model=model, config=config)
    start = time.time()
    for epoch in range(config.epochs):
        w = kl_weight(epoch, schedule)
        order = rng.permutation(n)
        model.train()
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = torch.from_numpy(order[lo:lo + config.batch_size])
            try:
                parts, total, _ = batch_losses(model, Xt[idx], text[idx], image[idx], w, config, rng=rng)
                value = float(total.detach())
            except FloatingPointError as exc:
                logger.error("non-finite loss at epoch %d batch %d: %s", epoch, b, exc)
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {exc}") from exc
            if not np.isfinite(value) or value > config.divergence:
                logger.error("divergence at epoch %d batch %d: total=%r", epoch, b, value)
                raise TrainingError(f"loss diverged at epoch {epoch}, batch {b} (total={value!r})")
            opt.zero_grad()
            total.backward()
            opt.step()
            result.history.append(_breakdown(parts, total, epoch, b))
        model.eval()
        with torch.no_grad():
            mi = torch.from_numpy(monitor_idx)
            parts, total, out = batch_losses(model, Xt[mi], text[mi], image[mi], w, config, t=mon_t, eps=mon_eps)
        result.monitor.append(_breakdown(parts, total, epoch, -1))
        result.router_log.extend(_router_rows(out, model, epoch, w))
        if progress:
            logger.info("epoch %d total=%.4f w_kl=%.3f", epoch, float(total), w)
        if callback is not None:
            callback(epoch, model)
    result.seconds = time.time() - start
    return result


def train(config: TrainConfig, dataset: Dataset, *, progress: bool = False) -> TrainResult:
    """Fit preprocessing on the train split, then the network."""
    assembler = FeatureAssembler(dataset.parcellation.labels, k=config.k, n_features=config.n_features,
                                 signed=config.topk_signed)
    train_ds = dataset.subset("train")
    X = assembler.fit_transform(train_ds.voxels)
    result = fit_network(config, X, assembler.network_labels_, train_ds.text, train_ds.image, progress=progress)
    result.assembler = assembler
    return result


def evaluate_features(model: FPEDNet, X, text, image) -> dict:
    model.eval()
    pred = model.predict(X)
    return embedding_metrics(pred, {"text": np.asarray(text), "image": np.asarray(image)})


def evaluate(model: FPEDNet, assembler: FeatureAssembler, dataset: Dataset, split: str = "test") -> dict:
    """Embedding-space metrics on one split of ``dataset``."""
    ds = dataset.subset(split)
    if len(ds) == 0:
        raise ValueError(f"split {split!r} is empty")
    if len(assembler.parcellation_labels) != ds.voxels.shape[-1]:
        raise CheckpointError("checkpoint parcellation does not match the dataset voxel count")
    if model.dim != ds.dim:
        raise CheckpointError(f"checkpoint embeds into R^{model.dim}, dataset targets are R^{ds.dim}")
    X = assembler.transform(ds.voxels)
    return evaluate_features(model, X, ds.text, ds.image)


def ablate(config: TrainConfig, dataset: Dataset, modes=("moe", "onlyv", "uniform", "attention", "transformer"),
           seeds=None, progress: bool = False) -> list[dict]:
    """Same data, epochs and seed for every mode; one metrics row per (mode, seed)."""
    seeds = [config.seed] if seeds is None else list(seeds)
    assembler = FeatureAssembler(dataset.parcellation.labels, k=config.k, n_features=config.n_features,
                                 signed=config.topk_signed)
    train_ds, test_ds = dataset.subset("train"), dataset.subset("test")
    X_train = assembler.fit_transform(train_ds.voxels)
    X_test = assembler.transform(test_ds.voxels)
    rows = []
    for seed in seeds:
        for mode in modes:
            cfg = config.with_overrides(mode=mode, seed=seed)
            res = fit_network(cfg, X_train, assembler.network_labels_, train_ds.text, train_ds.image,
                              progress=progress)
            row = {"mode": mode, "seed": seed, "encoder_params": res.model.encoder_size(),
                   "seconds": round(res.seconds, 2)}
            row.update(evaluate_features(res.model, X_test, test_ds.text, test_ds.image))
            rows.append(row)
            logger.info("ablation %s seed=%d two_way=%.4f", mode, seed, row["two_way"])
    return rows


# --------------------------------------------------------------------------
# checkpoints and CSV


def save_checkpoint(path, model: FPEDNet, config: TrainConfig, assembler: FeatureAssembler | None = None) -> None:
    arrays = {f"model.{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    arrays["meta.dim"] = np.array([model.dim])
    if assembler is not None:
        arrays["pre.parcellation"] = np.asarray(assembler.parcellation_labels)
        arrays["pre.lambda"] = np.array([assembler.lambda_])
        arrays["pre.segment_lengths"] = assembler.segment_lengths_
    # run locations are left out so identical runs give identical bytes wherever they are written
    save_arrays(path, config.with_overrides(data="", out="").dumps(), arrays)


def load_checkpoint(path):
    """Return ``(config, model, assembler or None)``."""
    text, arrays = load_arrays(path)
    try:
        config = parse_config_text(text)
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad embedded config: {exc}") from exc
    model = build_model(config, arrays["model.labels"], int(arrays["meta.dim"][0]))
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model.")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the embedded config: {exc}") from exc
    model.eval()
    assembler = None
    if "pre.parcellation" in arrays:
        assembler = FeatureAssembler(arrays["pre.parcellation"], k=config.k, n_features=config.n_features,
                                     signed=config.topk_signed)
        assembler.lambda_ = float(arrays["pre.lambda"][0])
        assembler.segment_lengths_ = arrays["pre.segment_lengths"]
        assembler.network_labels_ = np.repeat(np.arange(1, 8), assembler.segment_lengths_)
        assembler.n_features_in_ = len(arrays["pre.parcellation"])
    return config, model, assembler


def write_csv(path, rows, columns=None) -> None:
    rows = [r.as_row() if isinstance(r, LossBreakdown) else r for r in rows]
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_outputs(result: TrainResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "checkpoint": out / "model.ckpt",
        "losses": out / "losses.csv",
        "monitor": out / "monitor.csv",
        "router": out / "router.csv",
    }
    save_checkpoint(paths["checkpoint"], result.model, result.config, result.assembler)
    write_csv(paths["losses"], result.history, LossBreakdown.columns())
    write_csv(paths["monitor"], result.monitor, LossBreakdown.columns())
    write_csv(paths["router"], result.router_log)
    return paths
