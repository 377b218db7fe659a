"""Embedding-space retrieval metrics."""

from __future__ import annotations

import numpy as np


def cosine_matrix(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    p = pred / np.linalg.norm(pred, axis=1, keepdims=True).clip(1e-12)
    t = target / np.linalg.norm(target, axis=1, keepdims=True).clip(1e-12)
    return p @ t.T


def two_way_identification(pred: np.ndarray, target: np.ndarray) -> float:
    """Fraction of (i, j != i) pairs where ``pred_i`` is closer to ``target_i`` than ``target_j``.

    Closeness is cosine similarity; exact ties count one half.
    """
    s = cosine_matrix(np.asarray(pred, float), np.asarray(target, float))
    n = len(s)
    if n < 2:
        raise ValueError("two-way identification needs at least two samples")
    diag = np.diag(s)[:, None]
    wins = (diag > s).astype(float) + 0.5 * (diag == s)
    np.fill_diagonal(wins, 0.0)
    return float(wins.sum() / (n * (n - 1)))


def top1_retrieval(pred: np.ndarray, target: np.ndarray) -> float:
    s = cosine_matrix(np.asarray(pred, float), np.asarray(target, float))
    return float((np.argmax(s, axis=1) == np.arange(len(s))).mean())


def mean_cosine(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.diag(cosine_matrix(np.asarray(pred, float), np.asarray(target, float))).mean())


def embedding_metrics(pred: dict, targets: dict) -> dict:
    """Two-way, top-1 and mean cosine per modality, plus the two-way average."""
    out = {}
    for m in pred:
        out[f"two_way_{m}"] = two_way_identification(pred[m], targets[m])
        out[f"top1_{m}"] = top1_retrieval(pred[m], targets[m])
        out[f"cos_{m}"] = mean_cosine(pred[m], targets[m])
    out["two_way"] = float(np.mean([out[f"two_way_{m}"] for m in pred]))
    return out
