import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fped.estimator import FPEDRegressor

SMALL = dict(n_features=64, tokens=2, width=3, hidden=4, l2_hidden=4, prior_hidden=8, diffusion_steps=10)


def _xy(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 64)), rng.standard_normal((n, 12))


def test_params_round_trip():
    est = FPEDRegressor(epochs=3, mode="uniform", params={"cf": 2.0})
    params = est.get_params()
    assert params["epochs"] == 3 and params["mode"] == "uniform" and params["params"] == {"cf": 2.0}
    twin = clone(est)
    assert twin.get_params() == params
    assert est.set_params(seed=4).seed == 4


def test_fit_predict_score_shapes():
    X, Y = _xy()
    params = dict(SMALL)
    params.pop("n_features")
    est = FPEDRegressor(epochs=2, batch_size=4, params=params).fit(X, Y)
    assert est.predict(X).shape == (10, 12)
    emb = est.transform(X[:3])
    assert emb["text"].shape == (3, 6) and emb["image"].shape == (3, 6)
    assert 0.0 <= est.score(X, Y) <= 1.0
    assert len(est.history_) == 2 and est.n_features_in_ == 64


def test_same_seed_same_predictions():
    X, Y = _xy()
    params = {k: v for k, v in SMALL.items() if k != "n_features"}
    a = FPEDRegressor(epochs=2, batch_size=4, params=params).fit(X, Y).predict(X)
    b = FPEDRegressor(epochs=2, batch_size=4, params=params).fit(X, Y).predict(X)
    assert np.array_equal(a, b)


def test_errors():
    X, Y = _xy()
    with pytest.raises(NotFittedError):
        FPEDRegressor().predict(X)
    with pytest.raises(ValueError):
        FPEDRegressor(epochs=1, params={"nonsense": 1}).fit(X, Y)
    with pytest.raises(ValueError):
        FPEDRegressor(epochs=1).fit(X, Y[:, :5])
    with pytest.raises(ValueError):
        FPEDRegressor(epochs=1, network_labels=np.ones(10, int)).fit(X, Y)
