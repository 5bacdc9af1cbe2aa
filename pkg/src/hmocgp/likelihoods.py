"""Observation models for censored and uncensored outputs.

Every density here is evaluated in log space.  Right-censored points
contribute the log of a survival term, never ``log(1 - cdf)`` formed from a
materialised probability.

The vectorised entry point used by the variational objective is
:func:`log_likelihood`; the scalar helpers (:func:`log_censored_gaussian`,
:func:`log_censored_generic`) wrap it for direct use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import autodiff as ad
from .exceptions import ConfigurationError, LikelihoodDomainError

FAMILIES = ("gaussian", "poisson", "negative_binomial")
LINKS = ("identity", "exponential", "softplus")
SURVIVAL_MODES = ("greater_or_equal", "strictly_greater")

_N_PARAMS = {"gaussian": 2, "poisson": 1, "negative_binomial": 2}
_DEFAULT_LINKS = {
    "gaussian": ("identity", "softplus"),
    "poisson": ("softplus",),
    "negative_binomial": ("identity", "softplus"),
}
# the parameter that a homoscedastic model replaces by a per-output scalar
_SCALAR_LINKS = {"gaussian": "exponential", "negative_binomial": "softplus"}

ALPHA_FLOOR = 1e-10
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class LikelihoodSpec:
    """Distribution family plus one link per distribution parameter.

    Parameters
    ----------
    family : {"gaussian", "poisson", "negative_binomial"}
    links : tuple of str, optional
        Link mapping each latent GP into its parameter's domain.  Defaults to
        identity/softplus for the Gaussian (mean, variance) and the negative
        binomial (mean latent, dispersion), softplus for the Poisson rate.
    censored : bool
        Whether flagged points contribute a survival term.
    discrete_survival_mode : {"greater_or_equal", "strictly_greater"}
        Censored count observations use ``P(Y >= y)`` by default;
        ``strictly_greater`` gives ``P(Y > y) = 1 - F(y)``.
    """

    family: str = "gaussian"
    links: tuple | None = None
    censored: bool = True
    discrete_survival_mode: str = "greater_or_equal"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown likelihood family {self.family!r}")
        if self.links is None:
            object.__setattr__(self, "links", _DEFAULT_LINKS[self.family])
        else:
            object.__setattr__(self, "links", tuple(self.links))
        if len(self.links) != self.J:
            raise ConfigurationError(
                f"{self.family} needs {self.J} links, got {len(self.links)}"
            )
        for link in self.links:
            if link not in LINKS:
                raise ConfigurationError(f"unknown link {link!r}")
        if self.discrete_survival_mode not in SURVIVAL_MODES:
            raise ConfigurationError(
                f"unknown discrete_survival_mode {self.discrete_survival_mode!r}"
            )

    @property
    def J(self) -> int:
        return _N_PARAMS[self.family]

    @property
    def discrete(self) -> bool:
        return self.family != "gaussian"

    @property
    def scalar_link(self) -> str | None:
        """Link for the per-output scalar used when the second parameter is not a GP."""
        return _SCALAR_LINKS.get(self.family)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "links": list(self.links),
            "censored": self.censored,
            "discrete_survival_mode": self.discrete_survival_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LikelihoodSpec":
        return cls(
            family=d["family"],
            links=tuple(d["links"]) if d.get("links") is not None else None,
            censored=d.get("censored", True),
            discrete_survival_mode=d.get("discrete_survival_mode", "greater_or_equal"),
        )


# ---------------------------------------------------------------------------
# links


def link_apply(link: str, raw):
    """Map an unconstrained latent value into a parameter domain.

    Works on floats, arrays and tape variables.
    """
    if link == "identity":
        return raw
    if link == "exponential":
        return ad.exp(raw)
    if link == "softplus":
        return ad.softplus(raw)
    raise ConfigurationError(f"unknown link {link!r}")


def link_inverse(link: str, value):
    value = np.asarray(value, dtype=float)
    if link == "identity":
        return value
    if link == "exponential":
        return np.log(value)
    if link == "softplus":
        # log(expm1(v)) written to stay finite for large v
        return value + np.log(-np.expm1(-value))
    raise ConfigurationError(f"unknown link {link!r}")


# ---------------------------------------------------------------------------
# Gaussian pieces


def gaussian_log_cdf_complement(z):
    """``log(1 - Phi(z))`` for standardized residuals ``z``.

    Uses ``erfcx`` on the upper tail so the result stays accurate up to
    ``|z| = 38``; values beyond are clamped.
    """
    out = ad.log_ndtr_complement_value(z)
    return float(out) if np.ndim(out) == 0 else out


def _gaussian_terms(y, mean, var, censored_mask):
    resid = y - mean
    if not censored_mask.any():
        return -0.5 * (_LOG_2PI + ad.log(var)) - 0.5 * ad.square(resid) / var
    sd = ad.sqrt(var)
    dens = -0.5 * (_LOG_2PI + ad.log(var)) - 0.5 * ad.square(resid) / var
    surv = ad.log_ndtr_complement(resid / sd)
    return ad.where(censored_mask, surv, dens)


def log_censored_gaussian(y: float, f: float, var: float, is_censored: bool) -> float:
    """Tobit log-likelihood of one observation.

    Uncensored points score ``log N(y | f, var)``; censored ones the Gaussian
    survival ``log(1 - Phi((y - f) / sqrt(var)))``.
    """
    if not var > 0:
        raise LikelihoodDomainError(f"variance must be positive, got {var}")
    mask = np.asarray(bool(is_censored))
    return float(_gaussian_terms(np.asarray(y, float), np.asarray(f, float), np.asarray(var, float), mask))


# ---------------------------------------------------------------------------
# count families


def _check_counts(y):
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise LikelihoodDomainError("count likelihoods need non-negative integer observations")
    return y


def poisson_log_pmf(y, rate):
    return y * ad.log(rate) - rate - special.gammaln(y + 1.0)


def _poisson_log_sf_value(k, lam):
    """``log P(Y >= k)`` for Poisson(lam)."""
    k = np.asarray(k, dtype=float)
    lam = np.asarray(lam, dtype=float)
    kk = np.maximum(k, 1.0)
    with np.errstate(divide="ignore"):
        p = special.gammainc(kk, lam)
        out = np.log(p)
    # leading-term expansion when the regularised gamma underflows
    bad = ~np.isfinite(out)
    if np.any(bad):
        kb = np.broadcast_to(kk, out.shape)[bad]
        lb = np.broadcast_to(lam, out.shape)[bad]
        out = out.copy()
        out[bad] = kb * np.log(lb) - lb - special.gammaln(kb + 1.0) - np.log1p(-np.minimum(lb / (kb + 1.0), 0.5))
    return np.where(k <= 0, 0.0, out)


def poisson_log_sf(k, rate):
    """``log P(Y >= k)``; differentiable in ``rate``.

    ``d/d rate P(Y >= k) = pmf(k - 1)``, so the log-gradient is a ratio formed
    in log space.
    """
    k = np.asarray(k, dtype=float)
    lam = rate.value if isinstance(rate, ad.Var) else np.asarray(rate, float)
    val = _poisson_log_sf_value(k, lam)

    def vjp(g):
        km1 = np.maximum(k - 1.0, 0.0)
        log_pmf = km1 * np.log(lam) - lam - special.gammaln(km1 + 1.0)
        d = np.where(k <= 0, 0.0, np.exp(log_pmf - val))
        return (ad._unbroadcast(g * d, np.shape(lam)),)

    return ad.custom("poisson_log_sf", val, (rate,), vjp)


def negbin_params_from_latents(mu_latent, alpha_latent, links=("identity", "softplus"), counter=None):
    """Map the two latent values to ``(r, p)`` of the negative binomial.

    ``alpha = link(alpha_latent)``, ``r = 1 / alpha`` and ``p = sigmoid(mu * alpha)``
    where ``mu = link(mu_latent)``.  ``alpha`` is floored at ``1e-10``;
    ``counter['alpha_clamped']`` is incremented by the number of floored entries.
    """
    r, logit = _negbin_r_logit(mu_latent, alpha_latent, links, counter)
    rv = r.value if isinstance(r, ad.Var) else np.asarray(r, float)
    lv = logit.value if isinstance(logit, ad.Var) else np.asarray(logit, float)
    p = special.expit(lv)
    if np.ndim(rv) == 0:
        return float(rv), float(p)
    return rv, p


def _negbin_r_logit(mu_latent, alpha_latent, links, counter=None):
    mu = link_apply(links[0], mu_latent)
    alpha = link_apply(links[1], alpha_latent)
    av = alpha.value if isinstance(alpha, ad.Var) else np.asarray(alpha, float)
    n_clamped = int(np.sum(av < ALPHA_FLOOR))
    if n_clamped:
        alpha = ad.maximum(alpha, ALPHA_FLOOR)
        if counter is not None:
            counter["alpha_clamped"] = counter.get("alpha_clamped", 0) + n_clamped
    r = 1.0 / alpha if isinstance(alpha, ad.Var) else 1.0 / np.asarray(alpha, float)
    logit = mu * alpha
    return r, logit


def negbin_log_pmf(y, r, logit):
    """``log C(y+r-1, y) p^r (1-p)^y`` with ``p = sigmoid(logit)``."""
    return (ad.gammaln(y + r) - ad.gammaln(r) - special.gammaln(y + 1.0)
            + r * ad.log_sigmoid(logit) + y * ad.log_sigmoid(-logit))


def _negbin_log_sf_value(k, r, logit):
    """``log P(Y >= k) = log I_{1-p}(k, r)`` for ``k >= 1``."""
    k = np.asarray(k, dtype=float)
    kk = np.maximum(k, 1.0)
    q = special.expit(-logit)
    with np.errstate(divide="ignore"):
        out = np.log(special.betainc(kk, r, q))
    bad = ~np.isfinite(out)
    if np.any(bad):
        kb = np.broadcast_to(kk, out.shape)[bad]
        rb = np.broadcast_to(r, out.shape)[bad]
        lb = np.broadcast_to(logit, out.shape)[bad]
        # the first tail term bounds the sum from below
        out = out.copy()
        out[bad] = (special.gammaln(kb + rb) - special.gammaln(rb) - special.gammaln(kb + 1.0)
                    - rb * np.logaddexp(0.0, -lb) - kb * np.logaddexp(0.0, lb))
    return np.where(k <= 0, 0.0, out)


def negbin_log_sf(k, r, logit):
    """``log P(Y >= k)``; differentiable in ``r`` and ``logit``.

    The ``r`` derivative sums the score of the pmf over ``0..k-1``.
    """
    k = np.asarray(k, dtype=float)
    rv = r.value if isinstance(r, ad.Var) else np.asarray(r, float)
    lv = logit.value if isinstance(logit, ad.Var) else np.asarray(logit, float)
    shape = np.broadcast_shapes(k.shape, rv.shape, lv.shape)
    kb, rb, lb = (np.broadcast_to(a, shape) for a in (k, rv, lv))
    val = _negbin_log_sf_value(kb, rb, lb)

    def vjp(g):
        kk = np.maximum(kb, 1.0)
        log_p = -np.logaddexp(0.0, -lb)
        log_q = -np.logaddexp(0.0, lb)
        # d S / d logit = -p^r q^k / B(r, k)
        dlogit = -np.exp(rb * log_p + kk * log_q - special.betaln(rb, kk) - val)
        kmax = int(np.max(kb)) if kb.size else 0
        grid = np.arange(max(kmax, 1), dtype=float).reshape((-1,) + (1,) * len(shape))
        log_pmf = (special.gammaln(grid + rb) - special.gammaln(rb) - special.gammaln(grid + 1.0)
                   + rb * log_p + grid * log_q)
        score = special.digamma(grid + rb) - special.digamma(rb) + log_p
        terms = np.where(grid < kb, np.exp(log_pmf) * score, 0.0).sum(axis=0)
        dr = -terms / np.exp(val)
        zero = kb <= 0
        dr = np.where(zero, 0.0, dr)
        dlogit = np.where(zero, 0.0, dlogit)
        return (ad._unbroadcast(g * dr, rv.shape), ad._unbroadcast(g * dlogit, lv.shape))

    return ad.custom("negbin_log_sf", val, (r, logit), vjp)


# ---------------------------------------------------------------------------
# vectorised interface


def log_likelihood(y, params, spec: LikelihoodSpec, censored_mask, counter=None):
    """Elementwise log-likelihood.

    Parameters
    ----------
    y : array
        Observations.
    params : sequence
        ``spec.J`` linked parameter arrays (or tape variables) broadcastable
        against ``y``.  For the negative binomial pass the linked
        ``(mu, alpha)``.
    censored_mask : bool array
        Points contributing a survival term.  Ignored when ``spec.censored``
        is false.
    """
    y = np.asarray(y, dtype=float)
    mask = np.broadcast_to(np.asarray(censored_mask, dtype=bool), y.shape) if spec.censored else np.zeros(y.shape, bool)
    if spec.family == "gaussian":
        return _gaussian_terms(y, params[0], params[1], mask)
    y = _check_counts(y)
    shift = 1.0 if spec.discrete_survival_mode == "strictly_greater" else 0.0
    if spec.family == "poisson":
        dens = poisson_log_pmf(y, params[0])
        if not mask.any():
            return dens
        return ad.where(mask, poisson_log_sf(y + shift, params[0]), dens)
    # negative binomial: params are the linked (mu, alpha)
    alpha = params[1]
    av = alpha.value if isinstance(alpha, ad.Var) else np.asarray(alpha, float)
    n_clamped = int(np.sum(av < ALPHA_FLOOR))
    if n_clamped:
        alpha = ad.maximum(alpha, ALPHA_FLOOR)
        if counter is not None:
            counter["alpha_clamped"] = counter.get("alpha_clamped", 0) + n_clamped
    r = 1.0 / alpha if isinstance(alpha, ad.Var) else 1.0 / np.asarray(alpha, float)
    logit = params[0] * alpha
    dens = negbin_log_pmf(y, r, logit)
    if not mask.any():
        return dens
    return ad.where(mask, negbin_log_sf(y + shift, r, logit), dens)


def log_censored_generic(y: float, params, spec: LikelihoodSpec, is_censored: bool) -> float:
    """Log-likelihood of one observation under ``spec``.

    ``params`` are the linked distribution parameters: ``(mean, variance)``,
    ``(rate,)`` or ``(mu, alpha)``.
    """
    params = [np.asarray(p, dtype=float) for p in params]
    if len(params) != spec.J:
        raise LikelihoodDomainError(f"{spec.family} takes {spec.J} parameters, got {len(params)}")
    if spec.family == "gaussian" and not params[1] > 0:
        raise LikelihoodDomainError("variance must be positive")
    if spec.family == "poisson" and not params[0] > 0:
        raise LikelihoodDomainError("rate must be positive")
    if spec.family == "negative_binomial" and not params[1] > 0:
        raise LikelihoodDomainError("alpha must be positive")
    out = log_likelihood(np.asarray(y, float), params, spec, np.asarray(bool(is_censored)))
    return float(out)


def base_log_density(y, params, spec: LikelihoodSpec):
    """Uncensored log density (or mass) of the base distribution; plain numpy."""
    base = LikelihoodSpec(spec.family, spec.links, censored=False)
    return log_likelihood(y, params, base, False)


def base_moments(params, spec: LikelihoodSpec):
    """Mean and variance of the base distribution for linked parameters."""
    if spec.family == "gaussian":
        return np.asarray(params[0], float), np.asarray(params[1], float)
    if spec.family == "poisson":
        lam = np.asarray(params[0], float)
        return lam, lam
    alpha = np.maximum(np.asarray(params[1], float), ALPHA_FLOOR)
    r = 1.0 / alpha
    logit = np.asarray(params[0], float) * alpha
    odds_q = np.exp(-logit)  # (1 - p) / p
    mean = r * odds_q
    var = mean * (1.0 + odds_q)
    return mean, var


def sample_base(params, spec: LikelihoodSpec, rng: np.random.Generator):
    """Draw from the base distribution with linked parameters."""
    if spec.family == "gaussian":
        mean = np.asarray(params[0], float)
        sd = np.sqrt(np.asarray(params[1], float))
        return mean + sd * rng.standard_normal(np.broadcast_shapes(mean.shape, sd.shape))
    if spec.family == "poisson":
        return rng.poisson(np.asarray(params[0], float)).astype(float)
    alpha = np.maximum(np.asarray(params[1], float), ALPHA_FLOOR)
    p = special.expit(np.asarray(params[0], float) * alpha)
    return rng.negative_binomial(1.0 / alpha, p).astype(float)
