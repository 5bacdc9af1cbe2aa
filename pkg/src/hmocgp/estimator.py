"""scikit-learn compatible front end."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import CensoredDataset
from .likelihoods import LikelihoodSpec
from .model import TrainingConfig, fit, predict, variant_config


class CensoredGPRegressor(RegressorMixin, BaseEstimator):
    """Censored (multi-output, heteroscedastic) GP regression.

    Parameters
    ----------
    variant : {"ncgp", "moncgp", "cgp", "hcgp", "mocgp", "hmocgp"}
        Ablation switches (multi-output, heteroscedastic, censored).
    likelihood : {"gaussian", "poisson", "negative_binomial"}
    lmc_f_ranks, lmc_g_ranks : tuple of int
        Ranks ``R_q`` of the mixing matrices, one per latent process.
    mc_samples : int
        Reparameterised samples per ELBO estimate.
    learning_rate, max_steps, early_stopping_patience, eval_interval
        RMSprop and early-stopping settings.
    n_predict_samples : int
        Latent samples used by :meth:`predict`.
    random_state : int

    Examples
    --------
    >>> est = CensoredGPRegressor(variant="cgp", max_steps=10)
    >>> est.fit(np.linspace(0, 1, 5)[:, None], np.arange(5.0)).predict([[0.5]]).shape
    (1,)
    """

    def __init__(self, variant="hmocgp", likelihood="gaussian", lmc_f_ranks=(1,), lmc_g_ranks=(1,),
                 mc_samples=3, learning_rate=1e-3, max_steps=5000, early_stopping_patience=20,
                 eval_interval=25, n_predict_samples=100, discrete_survival_mode="greater_or_equal",
                 random_state=0):
        self.variant = variant
        self.likelihood = likelihood
        self.lmc_f_ranks = lmc_f_ranks
        self.lmc_g_ranks = lmc_g_ranks
        self.mc_samples = mc_samples
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.early_stopping_patience = early_stopping_patience
        self.eval_interval = eval_interval
        self.n_predict_samples = n_predict_samples
        self.discrete_survival_mode = discrete_survival_mode
        self.random_state = random_state

    def _config(self, D):
        lik = LikelihoodSpec(self.likelihood, discrete_survival_mode=self.discrete_survival_mode)
        training = TrainingConfig(
            learning_rate=self.learning_rate,
            max_steps=self.max_steps,
            early_stopping_patience=self.early_stopping_patience,
            eval_interval=self.eval_interval,
            seed=int(self.random_state or 0),
        )
        return variant_config(self.variant, D=D, likelihood=lik, lmc_f_ranks=tuple(self.lmc_f_ranks),
                              lmc_g_ranks=tuple(self.lmc_g_ranks), mc_samples=self.mc_samples,
                              training=training)

    def fit(self, X, y, censored=None, X_val=None, y_val=None):
        """Fit on ``(X, y)``; ``censored`` flags right-censored entries of ``y``.

        ``X_val``/``y_val`` enable early stopping on validation NLPD.
        """
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self._y_1d = y.ndim == 1
        Y = y[:, None] if self._y_1d else y
        if censored is not None:
            censored = np.asarray(censored, bool).reshape(Y.shape)
        ds = CensoredDataset(X=X, y=Y, censored=censored)
        val = None
        if X_val is not None:
            X_val, y_val = check_X_y(X_val, y_val, multi_output=True, y_numeric=True)
            val = CensoredDataset(X=X_val, y=y_val.reshape(len(X_val), -1))
        self.model_ = fit(ds, self._config(Y.shape[1]), validation=val)
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = Y.shape[1]
        return self

    def predict_distribution(self, X):
        """Full :class:`~hmocgp.model.Prediction` at ``X``."""
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        rng = np.random.default_rng(int(self.random_state or 0))
        return predict(self.model_, X, self.n_predict_samples, rng)

    def predict(self, X, return_std=False):
        pred = self.predict_distribution(X)
        mean, std = pred.mean, np.sqrt(pred.var)
        if self._y_1d:
            mean, std = mean[:, 0], std[:, 0]
        return (mean, std) if return_std else mean

    def score_nlpd(self, X, y) -> float:
        """Negative log predictive density of ``y`` (lower is better)."""
        pred = self.predict_distribution(X)
        return pred.nlpd(np.asarray(y, float).reshape(pred.mean.shape))
