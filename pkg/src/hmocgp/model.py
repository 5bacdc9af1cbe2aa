"""Heteroscedastic multi-output censored GP models trained by SVI.

Every latent parameter ``j`` of the likelihood (the mean ``f`` and, for
heteroscedastic models, the noise latent ``g``) gets an LMC prior
``N(0, K_j)`` over all ``D`` outputs jointly.  The variational posterior is
held in whitened coordinates: ``gamma_j = chol(K_j) v_j`` with

    q(v_j) = prod_d N(v_{j,d} | m_{j,d}, S_{j,d} S_{j,d}^T),

one full-covariance Gaussian per (output, parameter) pair.  The prior on
``v`` is a standard normal, so the KL term splits into one closed-form
Gaussian KL per (output, parameter) while the outputs stay coupled through
``chol(K_j)``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg as sla

from . import autodiff as ad
from .data import CensoredDataset, atomic_write_text
from .exceptions import (
    ConfigurationError,
    HmocgpError,
    InputShapeError,
    NonFiniteElboError,
    NonFiniteGradientError,
    NumericalDegeneracyError,
    TrainingDivergenceError,
)
from .kernels import (
    LmcSpec,
    RbfKernelParams,
    lmc_covariance_graph,
    median_pairwise_distance,
    squared_distances,
)
from .likelihoods import (
    LikelihoodSpec,
    base_log_density,
    base_moments,
    link_apply,
    link_inverse,
    log_likelihood,
)
from .linalg import BASE_JITTER, cholesky_with_jitter, gaussian_conditional
from .optim import OptimizerState, rmsprop_step

CHECKPOINT_VERSION = 1
MAX_CONSECUTIVE_FAILURES = 100

VARIANTS = {
    # name: (multi_output, heteroscedastic, censored)
    "ncgp": (False, False, False),
    "moncgp": (True, False, False),
    "cgp": (False, False, True),
    "hcgp": (False, True, True),
    "mocgp": (True, False, True),
    "hmocgp": (True, True, True),
}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    max_steps: int = 5000
    early_stopping_patience: int = 20
    eval_interval: int = 25
    seed: int = 0
    decay: float = 0.9
    epsilon: float = 1e-8
    early_stopping_metric: str = "nlpd"
    validation_samples: int = 100
    # False holds theta at its initial value and optimises phi only
    train_hyperparameters: bool = True

    def __post_init__(self):
        if self.early_stopping_metric not in ("nlpd", "mae"):
            raise ConfigurationError("early_stopping_metric must be 'nlpd' or 'mae'")
        if self.max_steps < 0 or self.eval_interval < 1 or self.early_stopping_patience < 1:
            raise ConfigurationError("max_steps >= 0, eval_interval >= 1 and patience >= 1 required")


@dataclass
class ModelConfig:
    """Ablation switches plus prior, likelihood and training settings.

    ``lmc_f_ranks`` / ``lmc_g_ranks`` give ``R_q`` for each of the ``Q``
    latent processes of the mean and noise latents; ``lmc_g_ranks`` is only
    used when ``heteroscedastic`` is set.
    """

    multi_output: bool = True
    heteroscedastic: bool = True
    censored: bool = True
    likelihood: LikelihoodSpec = field(default_factory=LikelihoodSpec)
    D: int = 1
    lmc_f_ranks: tuple = (1,)
    lmc_g_ranks: tuple | None = (1,)
    mc_samples: int = 3
    sampling: str = "marginal"
    normalize_y: bool | None = None
    base_jitter: float = BASE_JITTER
    training: TrainingConfig = field(default_factory=TrainingConfig)
    name: str | None = None

    def __post_init__(self):
        if isinstance(self.likelihood, dict):
            self.likelihood = LikelihoodSpec.from_dict(self.likelihood)
        if isinstance(self.training, dict):
            self.training = TrainingConfig(**self.training)
        self.lmc_f_ranks = tuple(int(r) for r in self.lmc_f_ranks)
        if self.lmc_g_ranks is not None:
            self.lmc_g_ranks = tuple(int(r) for r in self.lmc_g_ranks)
        if self.likelihood.censored != self.censored:
            self.likelihood = replace(self.likelihood, censored=self.censored)
        if self.heteroscedastic and self.likelihood.J < 2:
            raise ConfigurationError(f"{self.likelihood.family} has no second parameter to make heteroscedastic")
        if self.heteroscedastic and not self.lmc_g_ranks:
            raise ConfigurationError("heteroscedastic models need lmc_g_ranks")
        if not self.lmc_f_ranks or min(self.lmc_f_ranks) < 1:
            raise ConfigurationError("lmc_f_ranks needs at least one positive rank")
        if self.sampling not in ("marginal", "joint"):
            raise ConfigurationError("sampling must be 'marginal' or 'joint'")
        if self.D < 1 or self.mc_samples < 1:
            raise ConfigurationError("D and mc_samples must be positive")
        if self.normalize_y is None:
            self.normalize_y = self.likelihood.family == "gaussian"

    @property
    def gp_params(self) -> tuple:
        """Indices of likelihood parameters that carry a GP prior."""
        return (0, 1) if self.heteroscedastic else (0,)

    def ranks(self, j: int) -> tuple:
        return self.lmc_f_ranks if j == 0 else self.lmc_g_ranks

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "multi_output": self.multi_output,
            "heteroscedastic": self.heteroscedastic,
            "censored": self.censored,
            "likelihood": self.likelihood.to_dict(),
            "D": self.D,
            "lmc_f_ranks": list(self.lmc_f_ranks),
            "lmc_g_ranks": None if self.lmc_g_ranks is None else list(self.lmc_g_ranks),
            "mc_samples": self.mc_samples,
            "sampling": self.sampling,
            "normalize_y": self.normalize_y,
            "base_jitter": self.base_jitter,
            "training": asdict(self.training),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        if "training" in d and isinstance(d["training"], dict):
            tk = set(d["training"]) - set(TrainingConfig.__dataclass_fields__)
            if tk:
                raise ConfigurationError(f"unknown training config keys: {sorted(tk)}")
        return cls(**d)


def variant_config(name: str, D: int = 1, likelihood: LikelihoodSpec | None = None, **overrides) -> ModelConfig:
    """Configuration for one of the six named ablation variants."""
    key = name.lower()
    if key not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    mo, het, cen = VARIANTS[key]
    lik = likelihood or LikelihoodSpec()
    lik = replace(lik, censored=cen)
    return ModelConfig(multi_output=mo, heteroscedastic=het, censored=cen, likelihood=lik, D=D,
                       name=key, **overrides)


# ---------------------------------------------------------------------------
# parameters


def _kname(j, what):
    return f"kern{j}_{what}"


def _wname(j, q):
    return f"kern{j}_A{q}"


def _sname(j):
    return f"scalar{j}_raw"


def _mname(j, d):
    return f"q{j}_{d}_mean"


def _dname(j, d):
    return f"q{j}_{d}_logdiag"


def _lname(j, d):
    return f"q{j}_{d}_lower"


def is_variational(name: str) -> bool:
    return name.startswith("q")


def init_params(X, y, config: ModelConfig, rng: np.random.Generator) -> dict:
    """Initial ``theta`` and ``phi`` for (normalised) targets ``y``.

    Means start at zero, posterior factors at ``0.1 I``, kernel log-variances
    at zero, log-lengthscales at the log median pairwise input distance and
    mixing weights at ``N(0, 0.5^2)``.  Per-output scalar noise starts at
    ``0.1 var(y)``.
    """
    N, D = y.shape
    spec = config.likelihood
    params: dict[str, np.ndarray] = {}
    log_ls = math.log(median_pairwise_distance(X))
    for j in range(spec.J):
        if j in config.gp_params:
            ranks = config.ranks(j)
            params[_kname(j, "logvar")] = np.zeros(len(ranks))
            params[_kname(j, "logls")] = np.full(len(ranks), log_ls)
            for q, R in enumerate(ranks):
                params[_wname(j, q)] = rng.normal(0.0, 0.5, size=(D, R))
        else:
            params[_sname(j)] = _init_scalar(y, spec)
    for j in config.gp_params:
        for d in range(D):
            params[_mname(j, d)] = np.zeros(N)
            params[_dname(j, d)] = np.full(N, math.log(0.1))
            params[_lname(j, d)] = np.zeros(N * (N - 1) // 2)
    return params


def _init_scalar(y, spec: LikelihoodSpec) -> np.ndarray:
    if spec.family == "gaussian":
        with np.errstate(invalid="ignore"):
            var = np.var(y, axis=0) if len(y) > 1 else np.ones(y.shape[1])
        var = np.where(var > 0, var, 1.0)
        return np.log(0.1 * var)
    # negative binomial dispersion alpha = 1
    return np.full(y.shape[1], float(link_inverse(spec.scalar_link, 1.0)))


def flatten(params: dict) -> tuple[np.ndarray, list]:
    layout = [(k, v.shape) for k, v in params.items()]
    vec = np.concatenate([np.ravel(v) for v in params.values()]) if params else np.zeros(0)
    return vec, layout


def unflatten(vec: np.ndarray, layout) -> dict:
    out = {}
    i = 0
    for k, shape in layout:
        n = int(np.prod(shape)) if shape else 1
        out[k] = vec[i:i + n].reshape(shape).copy()
        i += n
    return out


# ---------------------------------------------------------------------------
# variational posterior


@dataclass
class VariationalPosterior:
    """Whitened Gaussian factors, one per (output ``d``, parameter ``j``).

    ``means[(d, j)]`` and ``chols[(d, j)]`` describe ``q(v_{j,d})``;
    ``whiten[j]`` is the ``ND x ND`` prior Cholesky factor mapping ``v_j`` to
    the latent values ``gamma_j`` (identity when absent).
    """

    means: dict
    chols: dict
    whiten: dict = field(default_factory=dict)

    @property
    def outputs(self) -> int:
        return 1 + max(d for d, _ in self.means)

    @property
    def params(self) -> tuple:
        return tuple(sorted({j for _, j in self.means}))

    def stacked(self, j: int):
        D = self.outputs
        m = np.concatenate([self.means[(d, j)] for d in range(D)])
        S = sla.block_diag(*[self.chols[(d, j)] for d in range(D)])
        return m, S

    def latent_moments(self, j: int):
        """Mean and covariance of ``gamma_j`` (length ``N*D``, output-major)."""
        m, S = self.stacked(j)
        L = self.whiten.get(j)
        if L is None:
            return m, S @ S.T
        LS = L @ S
        return L @ m, LS @ LS.T

    def latent_chol(self, j: int) -> np.ndarray:
        """Lower-triangular factor of the ``gamma_j`` covariance."""
        _, S = self.stacked(j)
        L = self.whiten.get(j)
        return S if L is None else L @ S


def posterior_from_params(params: dict, config: ModelConfig, whiten: dict | None = None) -> VariationalPosterior:
    means, chols = {}, {}
    D = config.D
    for j in config.gp_params:
        for d in range(D):
            m = params[_mname(j, d)]
            means[(d, j)] = m.copy()
            chols[(d, j)] = np.asarray(ad.tril_from_parts(params[_dname(j, d)], params[_lname(j, d)], len(m)))
    return VariationalPosterior(means, chols, dict(whiten or {}))


def sample_reparam(posterior: VariationalPosterior, rng: np.random.Generator, n_samples: int = 1) -> dict:
    """Latent draws ``gamma_j = W (m + S eps)`` with ``eps ~ N(0, I)``.

    Returns ``{j: array (N*D, n_samples)}``.  Draw order is fixed, so a seeded
    generator gives identical samples across runs.
    """
    out = {}
    for j in posterior.params:
        m, S = posterior.stacked(j)
        eps = rng.standard_normal((len(m), n_samples))
        v = m[:, None] + S @ eps
        L = posterior.whiten.get(j)
        out[j] = v if L is None else L @ v
    return out


def kl_gaussian(q_mean, q_chol, prior_cov=None, base_jitter: float = BASE_JITTER):
    """``KL(N(mu, L L^T) || N(0, K))`` in closed form (tape-aware).

    ``prior_cov=None`` means ``K = I``.
    """
    n = np.shape(q_mean.value if isinstance(q_mean, ad.Var) else q_mean)[0]
    log_det_q = ad.vsum(ad.log(ad.square(ad.diag(q_chol))))
    if prior_cov is None:
        trace = ad.vsum(ad.square(q_chol))
        maha = ad.vsum(ad.square(q_mean))
        log_det_p = 0.0
    else:
        Lp, _ = cholesky_with_jitter(prior_cov, base_jitter, name="prior covariance")
        trace = ad.vsum(ad.square(ad.solve_triangular(Lp, q_chol)))
        maha = ad.vsum(ad.square(ad.solve_triangular(Lp, q_mean)))
        log_det_p = ad.logdet_from_cholesky(Lp)
    return 0.5 * (trace + maha - n + log_det_p - log_det_q)


# ---------------------------------------------------------------------------
# objective


@dataclass
class _Problem:
    """Training data in the form the objective consumes."""

    sqdist: np.ndarray
    y: np.ndarray          # (D, N, 1)
    censored: np.ndarray   # (D, N, 1)
    N: int
    D: int


def _problem(X, y, censored) -> _Problem:
    y = np.asarray(y, float)
    return _Problem(
        sqdist=squared_distances(X, X),
        y=y.T[:, :, None].copy(),
        censored=np.asarray(censored, bool).T[:, :, None].copy(),
        N=y.shape[0],
        D=y.shape[1],
    )


def draw_noise(config: ModelConfig, N: int, D: int, rng: np.random.Generator, n_samples: int | None = None) -> dict:
    """Standard-normal reparameterisation noise ``{j: (D, N, S)}``."""
    S = n_samples or config.mc_samples
    return {j: rng.standard_normal((D, N, S)) for j in config.gp_params}


def prior_factor(P, sqdist, config: ModelConfig, j: int, D: int):
    """Cholesky factor of the (jittered) LMC prior over ``gamma_j``."""
    ranks = config.ranks(j)
    logvar = P[_kname(j, "logvar")]
    logls = P[_kname(j, "logls")]
    K = lmc_covariance_graph(
        sqdist,
        [P[_wname(j, q)] for q in range(len(ranks))],
        [logvar[q] for q in range(len(ranks))],
        [logls[q] for q in range(len(ranks))],
    )
    return cholesky_with_jitter(K, config.base_jitter, name=f"K[{j}]", start_with_zero=False)


def _elbo_graph(P, prob: _Problem, config: ModelConfig, noise: dict, counter=None):
    """Monte-Carlo ELBO from parameter arrays or tape variables.

    Returns ``(elbo, expected_loglik, kl, jitters, loglik)`` where
    ``loglik`` holds the per-point, per-sample terms with shape ``(D, N, S)``.
    """
    N, D = prob.N, prob.D
    spec = config.likelihood
    kl = 0.0
    linked = []
    jitters = {}
    for j in range(spec.J):
        if j in config.gp_params:
            Lk, jit = prior_factor(P, prob.sqdist, config, j, D)
            jitters[j] = jit
            eps = noise[j]
            n_s = eps.shape[-1]
            means, var = [], 0.0
            for d in range(D):
                m = P[_mname(j, d)]
                S = ad.tril_from_parts(P[_dname(j, d)], P[_lname(j, d)], N)
                kl = kl + kl_gaussian(m, S)
                if config.sampling == "joint":
                    means.append(ad.reshape(m, (N, 1)) + S @ eps[d])
                else:
                    means.append(m)
                    # covariance of gamma_j restricted to its diagonal
                    LS = (Lk[:, d * N:(d + 1) * N] if D > 1 else Lk) @ S
                    var = var + ad.vsum(ad.square(LS), axis=1)
            V = ad.concatenate(means, axis=0) if D > 1 else means[0]
            if config.sampling == "joint":
                gamma = ad.reshape(Lk @ V, (D, N, n_s))
            else:
                mu = ad.reshape(Lk @ V, (D, N, 1))
                gamma = mu + ad.reshape(ad.sqrt(var), (D, N, 1)) * eps
            linked.append(link_apply(spec.links[j], gamma))
        else:
            raw = ad.reshape(P[_sname(j)], (D, 1, 1))
            linked.append(link_apply(spec.scalar_link, raw))
    S = noise[0].shape[-1]
    ll = log_likelihood(prob.y, linked, spec, prob.censored, counter)
    exp_ll = ad.vsum(ll) * (1.0 / S)
    return exp_ll - kl, exp_ll, kl, jitters, ll


def elbo(dataset: CensoredDataset, params: dict, config: ModelConfig, rng: np.random.Generator,
         n_samples: int | None = None, noise: dict | None = None, with_grad: bool = False):
    """Monte-Carlo evidence lower bound (sum over data, as in the objective).

    Works in the units of ``dataset`` (no normalisation).  With
    ``with_grad=True`` returns ``(value, {name: gradient})``.

    Raises
    ------
    NonFiniteElboError
        Naming the first data index whose expected log-likelihood is not finite.
    """
    prob = _problem(dataset.X, dataset.y, dataset.censored)
    if noise is None:
        noise = draw_noise(config, prob.N, prob.D, rng, n_samples)
    if not with_grad:
        with np.errstate(all="ignore"):
            value, _, _, _, ll = _elbo_graph(params, prob, config, noise)
        value = float(np.asarray(value))
        if not np.isfinite(value):
            _raise_nonfinite(ll)
        return value
    tape = ad.Tape()
    P = {k: tape.variable(v, name=k) for k, v in params.items()}
    with np.errstate(all="ignore"):
        value, _, _, _, ll = _elbo_graph(P, prob, config, noise)
    if not np.isfinite(value.value):
        _raise_nonfinite(ll.value)
    grads = tape.backward(value, list(P.values()))
    return float(value.value), dict(zip(P, grads))


def _raise_nonfinite(ll):
    bad = np.argwhere(~np.isfinite(np.asarray(ll)))
    if bad.size:
        d, n, _ = bad[0]
        raise NonFiniteElboError(f"non-finite expected log-likelihood at data index {n}, output {d}")
    raise NonFiniteElboError("non-finite ELBO (KL term)")


def exact_log_marginal(X, y, log_variance: float, log_lengthscale: float, noise_var: float,
                       weight: float = 1.0) -> float:
    """Closed-form log marginal likelihood of single-output GP regression."""
    y = np.asarray(y, float).ravel()
    sq = squared_distances(X, X)
    K = weight ** 2 * np.exp(log_variance - 0.5 * sq * np.exp(-2.0 * log_lengthscale))
    C = K + noise_var * np.eye(len(y))
    L = np.linalg.cholesky(C)
    a = sla.solve_triangular(L, y, lower=True)
    return float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * np.log(2 * np.pi))


# ---------------------------------------------------------------------------
# trained model


@dataclass
class TrainedModel:
    """Configuration, fitted parameters and training record.

    Single-output configurations fitted on several outputs keep one
    independent sub-model per output in ``components``.
    """

    config: ModelConfig
    params: dict = field(default_factory=dict)
    X: np.ndarray | None = None
    y_offset: np.ndarray | None = None
    y_scale: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    components: list | None = None

    @property
    def theta(self) -> dict:
        return {k: v for k, v in self.params.items() if not is_variational(k)}

    @property
    def phi(self) -> dict:
        return {k: v for k, v in self.params.items() if is_variational(k)}

    @property
    def D(self) -> int:
        if self.components is not None:
            return sum(c.D for c in self.components)
        return self.config.D

    def lmc_spec(self, j: int = 0) -> LmcSpec:
        """Fitted coregionalization weights and kernels of latent parameter ``j``."""
        ranks = self.config.ranks(j)
        return LmcSpec(
            weights=[self.params[_wname(j, q)] for q in range(len(ranks))],
            kernels=[RbfKernelParams(float(a), float(b)) for a, b in
                     zip(self.params[_kname(j, "logvar")], self.params[_kname(j, "logls")])],
        )

    def whitening(self) -> dict:
        sq = squared_distances(self.X, self.X)
        return {j: prior_factor(self.params, sq, self.config, j, self.config.D)[0]
                for j in self.config.gp_params}

    def posterior(self) -> VariationalPosterior:
        return posterior_from_params(self.params, self.config, self.whitening())

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "diagnostics": _jsonable(self.diagnostics),
        }
        if self.components is not None:
            out["components"] = [c.to_dict() for c in self.components]
            return out
        phi = []
        for j in self.config.gp_params:
            for d in range(self.config.D):
                n = len(self.params[_mname(j, d)])
                L = np.asarray(ad.tril_from_parts(self.params[_dname(j, d)], self.params[_lname(j, d)], n))
                phi.append({
                    "output": d,
                    "param": j,
                    "mean": self.params[_mname(j, d)].tolist(),
                    "L": L.ravel().tolist(),
                    "log_diag": self.params[_dname(j, d)].tolist(),
                })
        out.update({
            "theta": {k: {"shape": list(v.shape), "values": np.ravel(v).tolist()} for k, v in self.theta.items()},
            "phi": phi,
            "training_inputs": self.X.tolist(),
            "y_offset": self.y_offset.tolist(),
            "y_scale": self.y_scale.tolist(),
        })
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        if d.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint format {d.get('format_version')!r}")
        config = ModelConfig.from_dict(d["config"])
        if "components" in d:
            return cls(config=config, diagnostics=d.get("diagnostics", {}),
                       components=[cls.from_dict(c) for c in d["components"]])
        params = {}
        for k, spec in d["theta"].items():
            params[k] = np.asarray(spec["values"], float).reshape(spec["shape"])
        for entry in d["phi"]:
            j, dd = entry["param"], entry["output"]
            m = np.asarray(entry["mean"], float)
            n = len(m)
            L = np.asarray(entry["L"], float).reshape(n, n)
            params[_mname(j, dd)] = m
            params[_dname(j, dd)] = np.asarray(entry["log_diag"], float)
            params[_lname(j, dd)] = L[np.tril_indices(n, -1)].copy()
        order = list(init_params(np.zeros((2, 1)), np.zeros((2, config.D)), config, np.random.default_rng(0)))
        ordered = {k: params[k] for k in order if k in params}
        ordered.update({k: v for k, v in params.items() if k not in ordered})
        return cls(
            config=config,
            params=ordered,
            X=np.asarray(d["training_inputs"], float).reshape(-1, np.shape(d["training_inputs"])[1] if d["training_inputs"] else 1),
            y_offset=np.asarray(d["y_offset"], float),
            y_scale=np.asarray(d["y_scale"], float),
            diagnostics=d.get("diagnostics", {}),
        )

    def save(self, path) -> Path:
        atomic_write_text(path, json.dumps(self.to_dict()) + "\n")
        return Path(path)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# prediction


@dataclass
class Prediction:
    """Predictive summaries at ``M`` test inputs for ``D`` outputs.

    ``latent_mean`` / ``latent_var`` have shape ``(J, M, D)`` and describe
    ``q(gamma_*)`` before the link (scalar parameters have zero variance);
    ``samples`` holds ``J`` arrays ``(M, D, S)`` of linked parameter draws in
    data units; ``mean`` / ``var`` are the base-distribution predictive
    moments.
    """

    latent_mean: np.ndarray
    latent_var: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    samples: list
    likelihood: LikelihoodSpec

    def point(self, kind: str = "mean") -> np.ndarray:
        """Point prediction: sample average (``mean``) or median of the base mean."""
        if kind == "mean":
            return self.mean
        if kind == "median":
            m, _ = base_moments(self.samples, self.likelihood)
            return np.median(m, axis=-1)
        raise ConfigurationError(f"unknown point estimate {kind!r}")

    def nlpd(self, y_true) -> float:
        from .metrics import nlpd
        return nlpd(self.samples, y_true, self.likelihood)


def _to_data_units(linked: list, spec: LikelihoodSpec, offset, scale) -> list:
    if spec.family != "gaussian":
        return linked
    return [offset + scale * linked[0], scale ** 2 * linked[1]]


def predict(model: TrainedModel, X_star, n_samples: int = 100, rng: np.random.Generator | None = None) -> Prediction:
    """Monte-Carlo predictive distribution at ``X_star``."""
    if rng is None:
        rng = np.random.default_rng(0)
    if model.components is not None:
        parts = [predict(c, X_star, n_samples, rng) for c in model.components]
        return Prediction(
            latent_mean=np.concatenate([p.latent_mean for p in parts], axis=2),
            latent_var=np.concatenate([p.latent_var for p in parts], axis=2),
            mean=np.concatenate([p.mean for p in parts], axis=1),
            var=np.concatenate([p.var for p in parts], axis=1),
            samples=[np.concatenate([p.samples[j] for p in parts], axis=1) for j in range(len(parts[0].samples))],
            likelihood=parts[0].likelihood,
        )
    config = model.config
    spec = config.likelihood
    Xs = np.asarray(X_star, float)
    if Xs.ndim == 1:
        Xs = Xs[:, None] if model.X.shape[1] == 1 else Xs[None, :]
    if Xs.shape[1] != model.X.shape[1]:
        raise InputShapeError(f"X_star has {Xs.shape[1]} columns, training inputs have {model.X.shape[1]}")
    M, D, N = Xs.shape[0], config.D, model.X.shape[0]
    P = model.params
    sq_nn = squared_distances(model.X, model.X)
    sq_sn = squared_distances(Xs, model.X)
    same = (sq_sn == 0.0).astype(float)
    lat_mean = np.zeros((spec.J, M, D))
    lat_var = np.zeros((spec.J, M, D))
    linked = []
    for j in range(spec.J):
        if j in config.gp_params:
            ranks = config.ranks(j)
            W = [P[_wname(j, q)] for q in range(len(ranks))]
            lv = [P[_kname(j, "logvar")][q] for q in range(len(ranks))]
            ll = [P[_kname(j, "logls")][q] for q in range(len(ranks))]
            K_nn = np.asarray(lmc_covariance_graph(sq_nn, W, lv, ll))
            Lk, jit = cholesky_with_jitter(K_nn, config.base_jitter, name=f"K[{j}]", start_with_zero=False)
            K_nn = K_nn + jit * np.eye(N * D)
            # the jitter acts as a nugget, so it also couples coincident inputs
            K_sn = np.asarray(lmc_covariance_graph(sq_sn, W, lv, ll)) + jit * np.kron(np.eye(D), same)
            k_ss = np.repeat(sum(np.diag(w @ w.T)[:, None] * np.exp(v) for w, v in zip(W, lv)), M, axis=1).ravel()
            k_ss = k_ss + jit
            post = posterior_from_params(P, config, {j: Lk})
            mu, Sigma = post.latent_moments(j)
            mean, var = gaussian_conditional(K_nn, K_sn, k_ss, mu, Sigma, full_cov=False)
            lat_mean[j] = mean.reshape(D, M).T
            lat_var[j] = var.reshape(D, M).T
            eps = rng.standard_normal((M, D, n_samples))
            draws = lat_mean[j][:, :, None] + np.sqrt(lat_var[j])[:, :, None] * eps
            linked.append(np.asarray(link_apply(spec.links[j], draws)))
        else:
            raw = P[_sname(j)]
            lat_mean[j] = np.broadcast_to(raw, (M, D))
            linked.append(np.broadcast_to(np.asarray(link_apply(spec.scalar_link, raw))[None, :, None],
                                          (M, D, n_samples)).copy())
    linked = _to_data_units(linked, spec, model.y_offset[None, :, None], model.y_scale[None, :, None])
    means, variances = base_moments(linked, spec)
    mean = means.mean(axis=-1)
    var = variances.mean(axis=-1) + means.var(axis=-1)
    return Prediction(lat_mean, lat_var, mean, var, linked, spec)


# ---------------------------------------------------------------------------
# training


def _normalisation(y, censored, config: ModelConfig):
    D = y.shape[1]
    if not config.normalize_y:
        return np.zeros(D), np.ones(D)
    offset = y.mean(axis=0)
    scale = y.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return offset, scale


def _validation_score(model: TrainedModel, validation: CensoredDataset, metric: str, n_samples: int, seed: int):
    pred = predict(model, validation.X, n_samples, np.random.default_rng(seed))
    target = validation.target()
    if metric == "mae":
        return float(np.mean(np.abs(pred.mean - target)))
    return pred.nlpd(target)


def fit(dataset: CensoredDataset, config: ModelConfig, validation: CensoredDataset | None = None,
        seed_offset: tuple = (), callback=None, init: dict | None = None) -> TrainedModel:
    """Maximise the ELBO over ``theta`` and ``phi`` jointly with RMSprop.

    Runs at most ``config.training.max_steps`` updates.  With ``validation``
    the model is scored every ``eval_interval`` steps and the best-scoring
    parameters are returned once ``early_stopping_patience`` evaluations pass
    without improvement.  Results are a deterministic function of
    ``config.training.seed`` and ``seed_offset``.

    ``init`` overrides named entries of the initial parameters (in
    normalised-output units), e.g. to pin the kernel hyperparameters.

    Raises
    ------
    TrainingDivergenceError
        After more than 100 consecutive non-finite steps.
    """
    if dataset.N == 0:
        raise ConfigurationError("cannot fit an empty dataset")
    dataset.validate()
    if config.D != dataset.D:
        config = replace(config, D=dataset.D)
    if not config.multi_output and dataset.D > 1:
        comps = []
        for d in range(dataset.D):
            sub_cfg = replace(config, D=1)
            val_d = None if validation is None else validation.output(d)
            comps.append(fit(dataset.output(d), sub_cfg, val_d, seed_offset + (d,), callback, init))
        diagnostics = {"per_output": [c.diagnostics for c in comps]}
        return TrainedModel(config=config, diagnostics=diagnostics, components=comps)

    tcfg = config.training
    ss = np.random.SeedSequence([tcfg.seed, *seed_offset])
    init_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    offset, scale = _normalisation(dataset.y, dataset.censored, config)
    y_n = (dataset.y - offset) / scale
    params = init_params(dataset.X, y_n, config, init_rng)
    prob = _problem(dataset.X, y_n, dataset.censored)
    # Jacobian of the normalisation for density terms, to report the ELBO in data units
    n_dens = int(np.sum(~dataset.censored)) if config.censored else dataset.N * dataset.D
    log_jac = -float(np.sum(np.log(scale) * np.sum(~dataset.censored if config.censored
                                                    else np.ones_like(dataset.censored), axis=0)))

    if init is not None:
        params.update({k: np.array(v, float) for k, v in init.items()})
    vec, layout = flatten(params)
    mask = None
    if not tcfg.train_hyperparameters:
        mask = np.concatenate([np.full(np.size(v), is_variational(k), float) for k, v in params.items()])
    state = OptimizerState(learning_rate=tcfg.learning_rate, decay=tcfg.decay, epsilon=tcfg.epsilon)
    diagnostics = {"elbo_trace": [], "skipped_steps": 0, "jitter_events": 0, "alpha_clamped": 0,
                   "best_step": None, "stopped_early": False, "validation_trace": []}
    counter = {}
    best = None
    best_score = np.inf
    bad_evals = 0
    consecutive = 0
    model = TrainedModel(config=config, params=params, X=dataset.X.copy(), y_offset=offset, y_scale=scale,
                         diagnostics=diagnostics)
    for step in range(tcfg.max_steps):
        noise = draw_noise(config, prob.N, prob.D, noise_rng)
        tape = ad.Tape()
        P = {k: tape.variable(v, name=k) for k, v in unflatten(vec, layout).items()}
        try:
            with np.errstate(over="ignore", divide="ignore", invalid="ignore", under="ignore"):
                value, _, _, jitters, _ = _elbo_graph(P, prob, config, noise, counter)
                if not np.isfinite(value.value):
                    raise NonFiniteElboError("non-finite ELBO")
                grads = tape.backward(-value, list(P.values()))
            grad_vec = np.concatenate([g.ravel() for g in grads])
            if mask is not None:
                grad_vec = grad_vec * mask
            vec, state = rmsprop_step(vec, grad_vec, state)
        except (NonFiniteGradientError, NonFiniteElboError, NumericalDegeneracyError, FloatingPointError):
            consecutive += 1
            diagnostics["skipped_steps"] += 1
            if consecutive > MAX_CONSECUTIVE_FAILURES:
                raise TrainingDivergenceError(
                    f"{consecutive} consecutive non-finite steps (last at step {step})") from None
            continue
        consecutive = 0
        diagnostics["jitter_events"] += sum(1 for v in jitters.values() if v > 0)
        diagnostics["elbo_trace"].append(float(value.value) + log_jac)
        if callback is not None:
            callback(step, float(value.value) + log_jac)
        if validation is not None and (step + 1) % tcfg.eval_interval == 0:
            model.params = unflatten(vec, layout)
            score = _validation_score(model, validation, tcfg.early_stopping_metric,
                                      tcfg.validation_samples, tcfg.seed)
            diagnostics["validation_trace"].append([step + 1, score])
            if score < best_score:
                best_score = score
                best = vec.copy()
                diagnostics["best_step"] = step + 1
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= tcfg.early_stopping_patience:
                    diagnostics["stopped_early"] = True
                    break
    if best is not None:
        vec = best
    diagnostics["alpha_clamped"] = counter.get("alpha_clamped", 0)
    model.params = unflatten(vec, layout)
    return model
