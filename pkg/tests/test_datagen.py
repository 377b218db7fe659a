import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fped.datagen import (N_FEATURES, ConfigurationError, FeatureAssembler, ParcellationMap, area_resample,
                          assemble_feature_vector, export_csv, generate_dataset, largest_remainder, load_dataset,
                          ridge_denoise, save_dataset, segment_lengths, select_ridge_lambda, topk_mask)


@pytest.fixture(scope="module")
def small():
    return generate_dataset(3, 24, 4, 8, V_total=1400, D=8, grid=4, n_active=280, latent_dim=4)


def _cos(a, b):
    return np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def test_noiseless_data_is_linearly_decodable():
    ds = generate_dataset(0, 120, 4, 40, V_total=2800, D=16, grid=4, noise=0.0, n_active=700, latent_dim=4)
    asm = FeatureAssembler(ds.parcellation.labels, k=700)
    tr, te = ds.subset("train"), ds.subset("test")
    Xtr, Xte = asm.fit_transform(tr.voxels), asm.transform(te.voxels)
    design = np.hstack([Xtr, np.ones((len(Xtr), 1))])
    for Y, Yt in ((tr.text, te.text), (tr.image, te.image)):
        coef, *_ = np.linalg.lstsq(design, Y, rcond=None)
        pred = np.hstack([Xte, np.ones((len(Xte), 1))]) @ coef
        assert _cos(pred, Yt).mean() > 0.99


def test_same_seed_same_dataset(tmp_path):
    a = generate_dataset(11, 5, 2, 3, V_total=700, D=4)
    b = generate_dataset(11, 5, 2, 3, V_total=700, D=4)
    save_dataset(a, tmp_path / "a.fped")
    save_dataset(b, tmp_path / "b.fped")
    assert (tmp_path / "a.fped").read_bytes() == (tmp_path / "b.fped").read_bytes()
    c = generate_dataset(12, 5, 2, 3, V_total=700, D=4)
    assert not np.array_equal(a.voxels, c.voxels)


def test_splits_are_disjoint(small):
    ids = [set(small.subset(s).ids.tolist()) for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert sum(map(len, ids)) == len(small)
    assert [len(i) for i in ids] == [24, 4, 8]


def test_repetitions_share_targets(small):
    assert small.voxels.shape == (36, 3, 1400)
    assert small.text.shape == (36, 8) and small.patches.shape == (36, 4, 4, 8)


@pytest.mark.parametrize("kwargs", [dict(V_total=6), dict(n_train=0), dict(n_test=0)])
def test_generate_rejects_bad_sizes(kwargs):
    args = dict(seed=0, n_train=2, n_val=1, n_test=1, V_total=700)
    args.update(kwargs)
    with pytest.raises(ConfigurationError):
        generate_dataset(**args)


def test_parcellation_covers_all_networks(small):
    assert small.parcellation.counts.sum() == 1400
    assert (small.parcellation.counts > 0).all()
    with pytest.raises(ConfigurationError):
        ParcellationMap(np.array([1, 2, 3]))


def test_planted_structure_lives_in_the_right_networks():
    ds = generate_dataset(1, 400, 1, 1, V_total=2800, D=8, noise=0.0, n_active=1400, latent_dim=4)
    tr = ds.subset("train")
    vox = tr.voxels[:, 0]
    lab = ds.parcellation.labels

    def r2(sel, Y):
        Xs = np.hstack([vox[:, sel], np.ones((len(vox), 1))])
        coef, *_ = np.linalg.lstsq(Xs, Y, rcond=None)
        return 1 - ((Xs @ coef - Y) ** 2).sum() / ((Y - Y.mean(0)) ** 2).sum()

    active = ds.active
    assert r2(active & (lab == 5), tr.text) > 0.99  # L carries text
    assert r2(active & (lab == 1), tr.image) > 0.99  # V carries image
    assert r2(active & (lab == 1), tr.text) < 0.2
    assert r2(active & (lab == 5), tr.image) < 0.2


# --------------------------------------------------------------------------
# top-k


def test_topk_magnitude_order():
    assert topk_mask(np.array([3.0, -5.0, 1.0, 2.0]), 2).tolist() == [True, True, False, False]


def test_topk_signed_flag():
    assert topk_mask(np.array([3.0, -5.0, 1.0, 2.0]), 2, signed=True).tolist() == [True, False, False, True]


def test_topk_ties_lowest_index():
    assert topk_mask(np.array([2.0, 2.0, 1.0]), 1).tolist() == [True, False, False]


def test_topk_full():
    assert topk_mask(np.array([1.0, -1.0, 0.0]), 3).all()


@pytest.mark.parametrize("k", [0, 5])
def test_topk_rejects_k(k):
    with pytest.raises(ValueError):
        topk_mask(np.zeros(4), k)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 60), elements=st.floats(-5, 5, allow_nan=False)), st.data())
def test_topk_popcount_and_oracle(v, data):
    k = data.draw(st.integers(1, len(v)))
    mask = topk_mask(v, k)
    assert mask.sum() == k
    oracle = sorted(range(len(v)), key=lambda i: (-abs(v[i]), i))[:k]
    assert set(np.flatnonzero(mask)) == set(oracle)


def test_topk_is_per_row():
    v = np.array([[1.0, 5.0, 2.0], [9.0, 0.0, 3.0]])
    assert topk_mask(v, 1).tolist() == [[False, True, False], [True, False, False]]


# --------------------------------------------------------------------------
# ridge


def test_ridge_examples():
    assert ridge_denoise([1.0, 3.0], 0.0) == pytest.approx(2.0, abs=0)
    assert ridge_denoise([1.0, 3.0], 2.0) == pytest.approx(1.0, abs=1e-15)
    assert ridge_denoise([1.0, 3.0], np.inf) == 0.0
    assert abs(ridge_denoise([1.0, 3.0], 1e12)) < 1e-11


def test_ridge_errors():
    with pytest.raises(ValueError):
        ridge_denoise(np.zeros((0, 3)), 1.0)
    with pytest.raises(ValueError):
        ridge_denoise([1.0], -1.0)


def test_ridge_is_vectorised_over_voxels():
    reps = np.array([[1.0, 2.0], [3.0, 6.0]])
    assert np.allclose(ridge_denoise(reps, 2.0), [1.0, 2.0])


def test_lambda_selection_prefers_shrinkage_for_pure_noise():
    rng = np.random.default_rng(0)
    reps = rng.standard_normal((50, 4, 30))
    assert select_ridge_lambda(reps, np.ones((50, 30), bool)) == 10.0
    signal = reps * 0.01 + 5.0
    assert select_ridge_lambda(signal, np.ones((50, 30), bool)) == 0.1


def test_preprocessing_is_leakage_free(small):
    tr, te = small.subset("train"), small.subset("test")
    a = FeatureAssembler(small.parcellation.labels, k=280).fit(tr.voxels)
    out1 = a.transform(te.voxels)
    # refit on the same train data, then transform test again: bit-identical
    b = FeatureAssembler(small.parcellation.labels, k=280).fit(tr.voxels)
    assert a.lambda_ == b.lambda_
    assert np.array_equal(out1, b.transform(te.voxels))
    # perturbing the test split never moves the fitted state
    before = (a.lambda_, a.segment_lengths_.copy())
    a.transform(te.voxels * 100)
    assert a.lambda_ == before[0] and np.array_equal(a.segment_lengths_, before[1])


# --------------------------------------------------------------------------
# assembly


def test_equal_counts_segment_lengths():
    assert segment_lengths([10] * 7).tolist() == [586] + [585] * 6


def test_single_network_owns_everything():
    labels = np.repeat(np.arange(1, 8), 10)
    mask = labels == 4
    fv = assemble_feature_vector(np.arange(70.0), mask, labels)
    assert len(fv.values) == N_FEATURES
    assert (fv.labels == 4).all()


def test_doubling_counts_keeps_lengths():
    counts = np.array([5, 17, 3, 9, 11, 2, 30])
    assert np.array_equal(segment_lengths(counts), segment_lengths(2 * counts))


def test_assemble_rejects_empty_mask():
    labels = np.repeat(np.arange(1, 8), 2)
    with pytest.raises(ValueError):
        assemble_feature_vector(np.zeros(14), np.zeros(14, bool), labels)


def test_segments_are_ordered_by_network():
    labels = np.array([7, 1, 3, 1, 2, 4, 5, 6, 7])
    fv = assemble_feature_vector(np.arange(9.0), np.ones(9, bool), labels, n_features=18)
    assert np.all(np.diff(fv.labels) >= 0)
    assert fv.labels[0] == 1 and fv.labels[-1] == 7


def test_area_resample_constant_and_mean():
    assert np.allclose(area_resample(np.full(7, 3.0), 4), 3.0)
    x = np.arange(6.0)
    assert np.allclose(area_resample(x, 3), [0.5, 2.5, 4.5])
    stretched = area_resample(np.array([1.0, 3.0]), 4)
    assert np.allclose(stretched, [1.0, 1.0, 3.0, 3.0])
    # area preserving
    y = np.random.default_rng(0).standard_normal(13)
    assert np.isclose(area_resample(y, 5).mean(), y.mean())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 500), min_size=7, max_size=7).filter(lambda c: sum(c) > 0))
def test_assemble_always_4096(counts):
    labels = np.repeat(np.arange(1, 8), [max(c, 1) for c in counts])
    mask = np.zeros(len(labels), bool)
    start = 0
    for net, c in enumerate(counts):
        mask[start:start + c] = True
        start += max(c, 1)
    fv = assemble_feature_vector(np.ones(len(labels)), mask, labels)
    assert len(fv.values) == 4096 and len(fv.labels) == 4096


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=12).filter(lambda w: sum(w) > 0),
       st.integers(0, 5000))
def test_largest_remainder_total(weights, total):
    out = largest_remainder(weights, total)
    assert out.sum() == total
    quota = total * np.asarray(weights) / sum(weights)
    assert np.all(np.abs(out - quota) < 1.0 + 1e-9)


def test_assembler_layout_is_frozen(small):
    asm = FeatureAssembler(small.parcellation.labels, k=280).fit(small.subset("train").voxels)
    X = asm.transform(small.voxels)
    assert X.shape == (len(small), N_FEATURES)
    assert asm.network_labels_.shape == (N_FEATURES,)
    assert asm.get_params()["k"] == 280


# --------------------------------------------------------------------------
# files


def test_dataset_round_trip(tmp_path, small):
    path = tmp_path / "d.fped"
    save_dataset(small, path)
    back = load_dataset(path)
    for name in ("voxels", "text", "image", "patches", "split", "ids"):
        assert np.array_equal(getattr(back, name), getattr(small, name))
    assert np.array_equal(back.parcellation.labels, small.parcellation.labels)
    assert back.noise == small.noise and back.seed == small.seed
    raw = path.read_bytes()
    assert raw[:4] == b"FPED"


def test_dataset_rejects_garbage(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"NOPE" + bytes(100))
    with pytest.raises(ValueError):
        load_dataset(path)


def test_csv_export(tmp_path, small):
    path = tmp_path / "d.csv"
    export_csv(small, path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(small) + 1
    assert lines[0].startswith("id,split,voxel_mean,voxel_std,text_0")
    assert hashlib.sha256(path.read_bytes()).hexdigest()
