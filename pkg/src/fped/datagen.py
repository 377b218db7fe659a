"""Synthetic parcellated voxel data and the voxel -> feature-vector chain.

The generator plants a known mapping from functional networks to the two
target embeddings: visual and dorsal-attention voxels read out image
factors, limbic voxels read out text factors, default-mode voxels carry a
weak mix, and the remaining networks carry only noise. A fixed set of
"active" voxels sits on a high baseline so per-sample top-k selection is
meaningful.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .numerics import child_rng

logger = logging.getLogger(__name__)

NETWORKS = ("V", "SM", "DA", "VA", "L", "C", "DM")
N_NETWORKS = len(NETWORKS)
N_FEATURES = 4096
SPLITS = ("train", "val", "test")

MAGIC = b"FPED"
FORMAT_VERSION = 1

# Relative network sizes (whole-brain voxel share), roughly Yeo-7 shaped.
NETWORK_SHARE = np.array([0.15, 0.18, 0.12, 0.11, 0.08, 0.14, 0.22])

# Planted readout strengths per network: (text, image).
PLANTED = {
    "V": (0.0, 1.0),
    "SM": (0.0, 0.25),
    "DA": (0.0, 0.8),
    "VA": (0.0, 0.0),
    "L": (1.0, 0.0),
    "C": (0.0, 0.0),
    "DM": (0.3, 0.3),
}


class ConfigurationError(ValueError):
    pass


@dataclass
class ParcellationMap:
    """Per-voxel network labels in ``1..7``."""

    labels: np.ndarray
    names: tuple = NETWORKS

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.min() < 1 or self.labels.max() > N_NETWORKS:
            raise ConfigurationError("network labels must lie in 1..7")
        if len(np.unique(self.labels)) != N_NETWORKS:
            raise ConfigurationError("every network needs at least one voxel")

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_NETWORKS + 1)[1:]

    @property
    def n_voxels(self) -> int:
        return len(self.labels)


@dataclass
class FeatureVector:
    values: np.ndarray
    labels: np.ndarray
    sample_id: int = -1


@dataclass
class Dataset:
    """In-memory synthetic dataset.

    ``voxels`` has shape ``(n, R, V_total)``; ``patches`` ``(n, P, P, D)``;
    ``split`` holds 0/1/2 for train/val/test.
    """

    parcellation: ParcellationMap
    voxels: np.ndarray
    text: np.ndarray
    image: np.ndarray
    patches: np.ndarray
    split: np.ndarray
    ids: np.ndarray
    noise: float = 1.0
    seed: int = 0
    active: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_repeats(self) -> int:
        return self.voxels.shape[1]

    @property
    def dim(self) -> int:
        return self.text.shape[1]

    @property
    def grid(self) -> int:
        return self.patches.shape[1]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS.index(split))

    def subset(self, split: str) -> "Dataset":
        idx = self.indices(split)
        return Dataset(
            parcellation=self.parcellation,
            voxels=self.voxels[idx],
            text=self.text[idx],
            image=self.image[idx],
            patches=self.patches[idx],
            split=self.split[idx],
            ids=self.ids[idx],
            noise=self.noise,
            seed=self.seed,
            active=self.active,
        )

    def __len__(self) -> int:
        return len(self.ids)


def _random_orthonormal(rng, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    return q[:rows, :cols] if rows >= cols else q[:cols, :rows].T


def generate_dataset(
    seed: int,
    n_train: int,
    n_val: int,
    n_test: int,
    V_total: int = 20000,
    D: int = 64,
    *,
    grid: int = 8,
    n_repeats: int = 3,
    noise: float = 1.0,
    n_active: int = 2000,
    latent_dim: int = 16,
    baseline: float = 6.0,
    planted: dict | None = None,
) -> Dataset:
    """Generate a synthetic dataset with planted network -> target structure.

    Each stimulus has text factors ``u`` and image factors ``s`` (both
    ``latent_dim``-dimensional). Targets are fixed linear embeddings of them
    into ``R^D``. Active voxel ``v`` of network ``n`` reads out
    ``baseline + a_text[n] * <l_v, u> + a_img[n] * <r_v, s>`` plus
    per-repetition Gaussian noise of scale ``noise``; the remaining voxels
    are pure noise.
    """
    if V_total < N_NETWORKS:
        raise ConfigurationError(f"V_total={V_total} < {N_NETWORKS}")
    if min(n_train, n_val, n_test) < 1:
        raise ConfigurationError("every split needs at least one sample")
    if n_repeats < 1 or D < 1 or grid < 1:
        raise ConfigurationError("n_repeats, D and grid must be positive")
    planted = PLANTED if planted is None else planted
    n_active = min(n_active, V_total)

    rng_struct = child_rng(seed, 0)
    rng_stim = child_rng(seed, 1)
    rng_noise = child_rng(seed, 2)

    # Parcellation: shares rounded to counts, each network non-empty, labels shuffled.
    counts = largest_remainder(NETWORK_SHARE, V_total - N_NETWORKS) + 1
    labels = np.repeat(np.arange(1, N_NETWORKS + 1), counts)
    labels = labels[rng_struct.permutation(V_total)]
    parcellation = ParcellationMap(labels)

    # Balanced active set: n_active / 7 voxels per network (capped by network size).
    per_net = largest_remainder(np.ones(N_NETWORKS), n_active)
    active = np.zeros(V_total, dtype=bool)
    for net in range(N_NETWORKS):
        members = np.flatnonzero(labels == net + 1)
        take = min(per_net[net], len(members))
        active[rng_struct.choice(members, size=take, replace=False)] = True

    text_map = _random_orthonormal(rng_struct, latent_dim, D) * np.sqrt(D / latent_dim)
    image_map = _random_orthonormal(rng_struct, latent_dim, D) * np.sqrt(D / latent_dim)
    text_load = rng_struct.standard_normal((V_total, latent_dim)) / np.sqrt(latent_dim)
    image_load = rng_struct.standard_normal((V_total, latent_dim)) / np.sqrt(latent_dim)
    a_text = np.array([planted[n][0] for n in NETWORKS])[labels - 1] * active
    a_img = np.array([planted[n][1] for n in NETWORKS])[labels - 1] * active
    voxel_base = np.where(active, baseline + 0.5 * rng_struct.standard_normal(V_total), 0.0)

    n = n_train + n_val + n_test
    u = rng_stim.standard_normal((n, latent_dim))
    s = rng_stim.standard_normal((n, latent_dim))
    text = u @ text_map
    image = s @ image_map

    # Patch grid: a Gaussian bump (object) at a stimulus-specific location.
    centre = (0.5 + 0.3 * np.tanh(s[:, :2])) * (grid - 1)
    yy, xx = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    d2 = (yy[None] - centre[:, 0, None, None]) ** 2 + (xx[None] - centre[:, 1, None, None]) ** 2
    weight = 0.2 + np.exp(-d2 / (2 * (grid / 5.0) ** 2))
    patches = weight[..., None] * image[:, None, None, :]
    patches = patches + 0.1 * rng_stim.standard_normal(patches.shape)

    clean = voxel_base + (u @ text_load.T) * a_text + (s @ image_load.T) * a_img
    voxels = clean[:, None, :] + noise * rng_noise.standard_normal((n, n_repeats, V_total))

    split = np.repeat(np.arange(3, dtype=np.int8), [n_train, n_val, n_test])
    ids = np.arange(n, dtype=np.int64)
    return Dataset(parcellation, voxels, text, image, patches, split, ids, noise=noise, seed=seed, active=active)


# --------------------------------------------------------------------------
# preprocessing chain


def topk_mask(v: np.ndarray, k: int, signed: bool = False) -> np.ndarray:
    """Boolean mask of the ``k`` largest-magnitude entries (ties: lowest index).

    With ``signed=True`` the raw values are ranked instead of ``|v|``.
    Accepts a batch ``(..., V)``; the mask is computed per row.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    score = v if signed else np.abs(v)
    order = np.argsort(-score, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(v.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def ridge_denoise(repetitions, lam: float) -> np.ndarray:
    """Ridge fit of the repetitions on an all-ones design.

    Returns ``R / (R + lam) * mean(repetitions)`` along the first axis.
    """
    reps = np.asarray(repetitions, dtype=np.float64)
    if reps.shape[0] == 0:
        raise ValueError("need at least one repetition")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if np.isinf(lam):
        return np.zeros(reps.shape[1:]) if reps.ndim > 1 else np.float64(0.0)
    r = reps.shape[0]
    return r / (r + lam) * reps.mean(axis=0)


def select_ridge_lambda(train_reps: np.ndarray, masks: np.ndarray, grid: Sequence[float] = (0.1, 1.0, 10.0)) -> float:
    """Two-fold cross-validation over repetitions, training samples only.

    ``train_reps`` is ``(n, R, V)``. Even-indexed repetitions predict the
    mean of the odd-indexed ones and vice versa; squared error is averaged
    over masked voxels. Ties go to the smaller lambda.
    """
    r = train_reps.shape[1]
    if r < 2:
        return float(grid[0])
    fold_a = train_reps[:, 0::2]
    fold_b = train_reps[:, 1::2]
    errors = []
    for lam in grid:
        err = 0.0
        for fit, held in ((fold_a, fold_b), (fold_b, fold_a)):
            pred = ridge_denoise(np.moveaxis(fit, 1, 0), lam)
            err += float(((pred - held.mean(axis=1)) ** 2)[masks].mean())
        errors.append(err)
    return float(grid[int(np.argmin(errors))])


def largest_remainder(weights, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Remainders go to the largest fractional parts, ties to the lowest index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        raise ValueError("weights must have positive sum")
    quota = total * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    rest = total - int(base.sum())
    frac = quota - base
    order = np.lexsort((np.arange(len(w)), -frac))
    base[order[:rest]] += 1
    return base


def area_resample(values: np.ndarray, length: int) -> np.ndarray:
    """Average-pool ``values`` into ``length`` equal-width bins.

    Bin ``j`` covers ``[j m / length, (j + 1) m / length)`` in voxel units
    and averages the voxels it overlaps, weighted by overlap. Works for
    both shrinking and stretching.
    """
    values = np.asarray(values, dtype=np.float64)
    m = values.shape[-1]
    if length == 0:
        return np.zeros(values.shape[:-1] + (0,))
    if m == length:
        return values.copy()
    edges = np.arange(length + 1) * (m / length)
    csum = np.concatenate([np.zeros(values.shape[:-1] + (1,)), np.cumsum(values, axis=-1)], axis=-1)
    whole = np.minimum(np.floor(edges).astype(np.int64), m)
    frac = edges - whole
    idx = np.minimum(whole, m - 1)
    integral = csum[..., whole] + frac * values[..., idx]
    return np.diff(integral, axis=-1) / (m / length)


def segment_lengths(counts, n_features: int = N_FEATURES) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.sum() <= 0:
        raise ValueError("empty mask")
    return largest_remainder(counts, n_features)


def assemble_feature_vector(
    denoised: np.ndarray,
    mask: np.ndarray,
    parcellation: ParcellationMap | np.ndarray,
    n_features: int = N_FEATURES,
    lengths: np.ndarray | None = None,
    sample_id: int = -1,
) -> FeatureVector:
    """Concatenate masked voxels network by network into a fixed-length vector.

    Each network gets a contiguous segment (network 1 first). Segment
    lengths are proportional to the network's masked-voxel count unless
    ``lengths`` pins them.
    """
    labels = parcellation.labels if isinstance(parcellation, ParcellationMap) else np.asarray(parcellation)
    mask = np.asarray(mask, dtype=bool)
    denoised = np.asarray(denoised, dtype=np.float64)
    if not mask.any():
        raise ValueError("empty mask")
    counts = np.bincount(labels[mask], minlength=N_NETWORKS + 1)[1:]
    if lengths is None:
        lengths = segment_lengths(counts, n_features)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.sum() != n_features:
        raise ValueError("segment lengths must total n_features")
    values = np.zeros(n_features)
    out_labels = np.repeat(np.arange(1, N_NETWORKS + 1), lengths)
    start = 0
    for net in range(N_NETWORKS):
        length = int(lengths[net])
        members = mask & (labels == net + 1)
        if length and members.any():
            values[start:start + length] = area_resample(denoised[members], length)
        start += length
    return FeatureVector(values, out_labels, sample_id)


class FeatureAssembler(BaseEstimator, TransformerMixin):
    """Per-sample top-k, ridge denoising and proportional concatenation.

    ``fit`` takes training repetitions ``(n, R, V)``, picks the ridge
    strength by within-train cross-validation and freezes the segment
    layout from the mean training masked counts per network. ``transform``
    then maps any split to ``(n, n_features)`` with that frozen layout, so
    position ``i`` carries the same network label for every sample.
    """

    def __init__(self, parcellation_labels=None, k: int = 2000, n_features: int = N_FEATURES,
                 lambda_grid=(0.1, 1.0, 10.0), signed: bool = False):
        self.parcellation_labels = parcellation_labels
        self.k = k
        self.n_features = n_features
        self.lambda_grid = lambda_grid
        self.signed = signed

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[:, None, :]
        if X.ndim != 3:
            raise ValueError(f"expected (n, R, V) repetitions, got shape {X.shape}")
        if not np.isfinite(X).all():
            raise ValueError("input contains non-finite values")
        if len(self.parcellation_labels) != X.shape[-1]:
            raise ValueError("parcellation does not match the voxel count")
        return X

    def masks(self, X) -> np.ndarray:
        X = self._check(X)
        return topk_mask(X.mean(axis=1), self.k, signed=self.signed)

    def fit(self, X, y=None):
        X = self._check(X)
        labels = ParcellationMap(self.parcellation_labels).labels
        masks = topk_mask(X.mean(axis=1), self.k, signed=self.signed)
        self.lambda_ = select_ridge_lambda(X, masks, self.lambda_grid)
        counts = np.stack([np.bincount(labels[m], minlength=N_NETWORKS + 1)[1:] for m in masks])
        self.segment_lengths_ = segment_lengths(counts.mean(axis=0), self.n_features)
        self.network_labels_ = np.repeat(np.arange(1, N_NETWORKS + 1), self.segment_lengths_)
        self.n_features_in_ = X.shape[-1]
        logger.info("ridge lambda=%g, segments=%s", self.lambda_, self.segment_lengths_.tolist())
        return self

    def transform(self, X):
        check_is_fitted(self, "lambda_")
        X = self._check(X)
        masks = topk_mask(X.mean(axis=1), self.k, signed=self.signed)
        denoised = ridge_denoise(np.moveaxis(X, 1, 0), self.lambda_)
        labels = np.asarray(self.parcellation_labels)
        out = np.empty((len(X), self.n_features))
        for i in range(len(X)):
            out[i] = assemble_feature_vector(denoised[i], masks[i], labels, self.n_features,
                                             lengths=self.segment_lengths_).values
        return out


# --------------------------------------------------------------------------
# file formats


def _record_dtype(R: int, V: int, D: int, P: int) -> np.dtype:
    return np.dtype([
        ("id", "<u4"),
        ("split", "u1"),
        ("voxels", "<f8", (R, V)),
        ("text", "<f8", (D,)),
        ("image", "<f8", (D,)),
        ("patches", "<f8", (P, P, D)),
    ])


_HEADER = np.dtype([
    ("magic", "S4"), ("version", "<u4"), ("V", "<u4"), ("D", "<u4"), ("P", "<u4"), ("R", "<u4"),
    ("n_train", "<u4"), ("n_val", "<u4"), ("n_test", "<u4"), ("noise", "<f8"), ("seed", "<u8"),
])


def save_dataset(ds: Dataset, path) -> None:
    """Write the little-endian binary dataset file."""
    n, R, V = ds.voxels.shape
    header = np.zeros(1, dtype=_HEADER)
    header[0] = (MAGIC, FORMAT_VERSION, V, ds.dim, ds.grid, R,
                 *(int((ds.split == i).sum()) for i in range(3)), ds.noise, ds.seed)
    records = np.zeros(n, dtype=_record_dtype(R, V, ds.dim, ds.grid))
    records["id"] = ds.ids
    records["split"] = ds.split
    records["voxels"] = ds.voxels
    records["text"] = ds.text
    records["image"] = ds.image
    records["patches"] = ds.patches
    active = np.zeros(V, dtype=np.uint8) if ds.active is None else ds.active.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(ds.parcellation.labels.astype(np.uint8).tobytes())
        fh.write(active.tobytes())
        fh.write(records.tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    header = np.frombuffer(raw, dtype=_HEADER, count=1)[0]
    if header["magic"] != MAGIC:
        raise ValueError(f"{path}: not an FPED dataset file")
    if header["version"] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header['version']}")
    V, D, P, R = (int(header[k]) for k in ("V", "D", "P", "R"))
    n = int(header["n_train"] + header["n_val"] + header["n_test"])
    off = _HEADER.itemsize
    labels = np.frombuffer(raw, dtype=np.uint8, count=V, offset=off).astype(np.int64)
    off += V
    active = np.frombuffer(raw, dtype=np.uint8, count=V, offset=off).astype(bool)
    off += V
    rec = np.frombuffer(raw, dtype=_record_dtype(R, V, D, P), count=n, offset=off)
    return Dataset(
        parcellation=ParcellationMap(labels),
        voxels=rec["voxels"].copy(),
        text=rec["text"].copy(),
        image=rec["image"].copy(),
        patches=rec["patches"].copy(),
        split=rec["split"].astype(np.int8),
        ids=rec["id"].astype(np.int64),
        noise=float(header["noise"]),
        seed=int(header["seed"]),
        active=active if active.any() else None,
    )


def export_csv(ds: Dataset, path) -> None:
    """One row per sample: id, split, repetition-mean voxel summary and targets."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "split", "voxel_mean", "voxel_std"]
                   + [f"text_{j}" for j in range(ds.dim)] + [f"image_{j}" for j in range(ds.dim)])
        mean_vox = ds.voxels.mean(axis=1)
        for i in range(len(ds)):
            w.writerow([int(ds.ids[i]), SPLITS[ds.split[i]], repr(float(mean_vox[i].mean())),
                        repr(float(mean_vox[i].std()))]
                       + [repr(float(v)) for v in ds.text[i]] + [repr(float(v)) for v in ds.image[i]])
