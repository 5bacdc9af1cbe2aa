import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hmocgp.estimator import CensoredGPRegressor


def make_data(rng, n=40, D=1):
    X = np.sort(rng.uniform(0, 5, n))[:, None]
    Y = np.column_stack([np.sin(X[:, 0] + d) for d in range(D)]) + 0.1 * rng.normal(size=(n, D))
    return X, Y[:, 0] if D == 1 else Y


class TestParams:
    def test_clone_round_trip(self):
        est = CensoredGPRegressor(variant="cgp", max_steps=7, lmc_f_ranks=(2,))
        params = clone(est).get_params()
        assert params["variant"] == "cgp" and params["max_steps"] == 7 and params["lmc_f_ranks"] == (2,)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            CensoredGPRegressor().predict([[0.0]])


class TestFitPredict:
    def test_single_output_shapes(self, rng):
        X, y = make_data(rng)
        est = CensoredGPRegressor(variant="cgp", max_steps=200, learning_rate=0.01).fit(X, y)
        mean, std = est.predict(X[:5], return_std=True)
        assert mean.shape == (5,) and std.shape == (5,) and np.all(std > 0)
        assert est.n_features_in_ == 1 and est.n_outputs_ == 1

    def test_multi_output_shapes(self, rng):
        X, Y = make_data(rng, D=2)
        est = CensoredGPRegressor(variant="hmocgp", max_steps=20).fit(X, Y)
        assert est.predict(X).shape == (40, 2)
        assert np.isfinite(est.score_nlpd(X, Y))

    def test_learns_signal(self, rng):
        X, y = make_data(rng)
        est = CensoredGPRegressor(variant="ncgp", max_steps=1500, learning_rate=0.01).fit(X, y)
        assert est.score(X, y) > 0.8

    def test_deterministic(self, rng):
        X, y = make_data(rng)
        a = CensoredGPRegressor(variant="cgp", max_steps=30, random_state=5).fit(X, y).predict(X)
        b = CensoredGPRegressor(variant="cgp", max_steps=30, random_state=5).fit(X, y).predict(X)
        np.testing.assert_array_equal(a, b)

    def test_censoring_raises_predictions(self, rng):
        # clipped observations flagged as censored pull the fit above the clip level
        X, y = make_data(rng, n=60)
        clip = 0.3
        cen = y > clip
        y_obs = np.minimum(y, clip)
        kw = dict(max_steps=1500, learning_rate=0.01)
        plain = CensoredGPRegressor(variant="ncgp", **kw).fit(X, y_obs).predict(X)
        aware = CensoredGPRegressor(variant="cgp", **kw).fit(X, y_obs, censored=cen).predict(X)
        assert np.mean(aware[cen]) > np.mean(plain[cen])

    def test_poisson(self, rng):
        X = np.linspace(0, 5, 30)[:, None]
        y = rng.poisson(np.exp(1 + np.sin(X[:, 0]))).astype(float)
        est = CensoredGPRegressor(variant="cgp", likelihood="poisson", max_steps=50).fit(X, y)
        assert np.all(est.predict(X) > 0)

    def test_feature_mismatch(self, rng):
        X, y = make_data(rng)
        est = CensoredGPRegressor(variant="cgp", max_steps=2).fit(X, y)
        with pytest.raises(ValueError):
            est.predict(np.zeros((2, 3)))

    def test_validation_early_stopping(self, rng):
        X, y = make_data(rng)
        Xv, yv = make_data(rng, n=10)
        est = CensoredGPRegressor(variant="cgp", max_steps=500, eval_interval=5, early_stopping_patience=1,
                                  learning_rate=0.05)
        est.fit(X, y, X_val=Xv, y_val=yv)
        assert est.model_.diagnostics["best_step"] is not None
