"""Per-expert patch similarity heatmaps and per-network routing contributions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datagen import NETWORKS
from .model import MODALITIES, ROUTED_MODES, FPEDNet
from .numerics import ShapeError
from .router import RoutingState
from .stroute import write_pgm


class DegenerateRoutingError(ValueError):
    """All routing weights are zero, so contributions are undefined."""


@dataclass
class HeatmapReport:
    sample_id: int
    similarity: dict = field(default_factory=dict)  # expert index (1-based) -> (P, P) grid
    zero_patches: dict = field(default_factory=dict)  # expert index -> (P, P) bool flags
    contributions: dict = field(default_factory=dict)  # modality -> (7,) simplex vector


def expert_patch_similarity(feature, patches) -> tuple[np.ndarray, np.ndarray]:
    """Cosine between one expert vector ``(D,)`` and every patch of ``(P, P, D)``.

    Zero-norm patches get similarity 0 and are flagged in the second return
    value. A zero-norm expert vector is an error.
    """
    f = np.asarray(feature, dtype=np.float64)
    p = np.asarray(patches, dtype=np.float64)
    if f.ndim != 1 or p.ndim != 3 or p.shape[-1] != f.shape[0]:
        raise ShapeError(f"expected (D,) and (P, P, D), got {f.shape} and {p.shape}")
    f_norm = np.linalg.norm(f)
    if f_norm == 0:
        raise ValueError("expert feature has zero norm")
    p_norm = np.linalg.norm(p, axis=-1)
    zero = p_norm == 0
    sim = (p @ f) / (np.where(zero, 1.0, p_norm) * f_norm)
    sim[zero] = 0.0
    return np.clip(sim, -1.0, 1.0), zero


def expert_vectors(model: FPEDNet, x, modality: str = "image") -> np.ndarray:
    """One ``R^D`` vector per first-layer expert: token mean, then the head projection.

    ``x`` is a single raw feature vector; returns ``(E, D)``.
    """
    if model.mode == "transformer":
        raise ValueError("the transformer ablation has no per-expert features")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    model.eval()
    with torch.no_grad():
        out = model(x, modalities=(modality,))
        feats = out.expert_features[modality][0]  # (E, G, d)
        return model.heads.project(model.heads.pool(feats), modality).numpy()


def routing_contribution(state: RoutingState, by: str = "weight") -> np.ndarray:
    """Share of routing assigned to each expert over a batch.

    ``by="weight"`` sums the routing weights over selected positions;
    ``by="count"`` counts selected positions instead.
    """
    if by not in ("weight", "count"):
        raise ValueError("by must be 'weight' or 'count'")
    src = state.weights if by == "weight" else state.masks
    src = src.detach()
    if src.dim() == 2:
        src = src[None]
    if src.shape[0] == 0:
        raise ValueError("empty batch")
    totals = src.double().sum(dim=(0, 2)).numpy()
    if totals.sum() <= 0:
        raise DegenerateRoutingError("all routing weights are zero")
    return totals / totals.sum()


def contributions(model: FPEDNet, X, by: str = "weight") -> dict:
    """Per-modality contribution vectors of a routed model over the rows of ``X``."""
    if model.mode not in ROUTED_MODES:
        raise ValueError(f"mode {model.mode!r} has no router")
    model.eval()
    with torch.no_grad():
        out = model(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    return {m: routing_contribution(out.routing[m], by) for m in MODALITIES}


def export_heatmap(grid, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (raw values) and ``<path>.pgm`` ([-1, 1] -> [0, 255])."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeError("heatmap must be 2-D")
    base = Path(path)
    csv_path, pgm_path = base.with_suffix(".csv"), base.with_suffix(".pgm")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])
    write_pgm(pgm_path, grid, lo=-1.0, hi=1.0)
    return csv_path, pgm_path


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def build_report(model: FPEDNet, x, patches, sample_id: int = 0, by: str = "weight") -> HeatmapReport:
    """Heatmaps for every expert and contribution vectors for one sample."""
    report = HeatmapReport(sample_id=sample_id)
    for k, vec in enumerate(expert_vectors(model, x, "image"), start=1):
        report.similarity[k], report.zero_patches[k] = expert_patch_similarity(vec, patches)
    if model.mode in ROUTED_MODES:
        report.contributions = contributions(model, x, by)
    return report


def write_report(report: HeatmapReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    for k, grid in report.similarity.items():
        paths.extend(export_heatmap(grid, out / f"expert_{k}_heatmap"))
    for modality, vec in report.contributions.items():
        path = out / f"routing_contrib_{modality}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["network", "contribution"])
            for name, v in zip(NETWORKS, vec):
                writer.writerow([name, repr(float(v))])
        paths.append(path)
    return paths
