"""Synthetic data from multi-output GP priors and the censoring protocols."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data import CensoredDataset, cyclic_time_features
from .exceptions import ConfigurationError, DataError
from .kernels import LmcSpec, RbfKernelParams, rbf_matrix, squared_distances
from .likelihoods import LikelihoodSpec, link_apply, sample_base
from .linalg import cholesky_with_jitter

OVERLAP_SCENARIOS = ("none", "overlap_0", "overlap_50", "overlap_100_mild", "overlap_100_hard")

# Censored input intervals per output for the two-output overlap study on
# [0, 10].  Output 0 keeps the same region in the 0% / 100%-hard pair and in
# the 50% / 100%-mild pair.
_OVERLAP_REGIONS = {
    "overlap_0": [[(1.3, 5.5)], [(6.0, 9.5)]],
    "overlap_50": [[(1.3, 2.7), (4.1, 5.5)], [(1.3, 2.7), (6.5, 7.9)]],
    "overlap_100_mild": [[(1.3, 2.7), (4.1, 5.5)], [(1.3, 2.7), (4.1, 5.5)]],
    "overlap_100_hard": [[(1.3, 5.5)], [(1.3, 5.5)]],
}


def default_lmc_f() -> LmcSpec:
    """Two strongly correlated outputs (correlation about 0.9)."""
    return LmcSpec(weights=[np.array([[1.0, 0.0], [0.8, 0.4]])],
                   kernels=[RbfKernelParams(0.0, np.log(1.0))])


def default_lmc_g() -> LmcSpec:
    return LmcSpec(weights=[np.array([[1.0], [0.9]])],
                   kernels=[RbfKernelParams(0.0, np.log(2.0))])


@dataclass
class SyntheticSpec:
    """Generative setup for a synthetic censored data set.

    Outputs are ``mean_offset + f`` plus noise, so the default draws are
    mostly positive like demand series.  The noise variance is
    ``link(g + noise_offset)`` when heteroscedastic
    (``g`` drawn from ``lmc_g``) and ``noise_variance`` otherwise.
    ``censor_regions[d]`` lists the input intervals censored on output ``d``;
    an ``overlap_scenario`` other than ``"none"`` replaces them.
    """

    D: int = 2
    N: int = 100
    lo: float = 0.0
    hi: float = 10.0
    lmc_f: LmcSpec = field(default_factory=default_lmc_f)
    lmc_g: LmcSpec | None = field(default_factory=default_lmc_g)
    heteroscedastic: bool = True
    mean_offset: float = 3.0
    noise_offset: float = -2.5
    noise_variance: float = 0.05
    noise_link: str = "softplus"
    censor_regions: list = field(default_factory=lambda: [[(1.3, 5.5)], []])
    overlap_scenario: str = "none"
    threshold_scale: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.overlap_scenario not in OVERLAP_SCENARIOS:
            raise ConfigurationError(f"unknown overlap_scenario {self.overlap_scenario!r}")
        if self.overlap_scenario != "none":
            if self.D != 2:
                raise ConfigurationError("overlap scenarios are defined for D=2 only")
            self.censor_regions = [list(r) for r in _OVERLAP_REGIONS[self.overlap_scenario]]
        self.censor_regions = [[tuple(map(float, iv)) for iv in regions] for regions in self.censor_regions]
        if self.N < 1 or self.D < 1 or not self.hi > self.lo:
            raise ConfigurationError("need N >= 1, D >= 1 and hi > lo")
        if len(self.censor_regions) > self.D:
            raise ConfigurationError(f"censor_regions lists {len(self.censor_regions)} outputs, D={self.D}")
        self.censor_regions += [[] for _ in range(self.D - len(self.censor_regions))]
        for regions in self.censor_regions:
            for a, b in regions:
                if not (self.lo <= a <= b <= self.hi):
                    raise ConfigurationError(f"interval ({a}, {b}) not inside [{self.lo}, {self.hi}]")
        if self.lmc_f.D != self.D:
            raise ConfigurationError(f"lmc_f describes {self.lmc_f.D} outputs, D={self.D}")
        if self.heteroscedastic and (self.lmc_g is None or self.lmc_g.D != self.D):
            raise ConfigurationError("heteroscedastic synthetic data needs lmc_g with D outputs")
        if not 0.0 < self.threshold_scale <= 1.0:
            raise ConfigurationError("threshold_scale must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "D": self.D, "N": self.N, "lo": self.lo, "hi": self.hi,
            "lmc_f": self.lmc_f.to_dict(),
            "lmc_g": None if self.lmc_g is None else self.lmc_g.to_dict(),
            "heteroscedastic": self.heteroscedastic,
            "mean_offset": self.mean_offset,
            "noise_offset": self.noise_offset,
            "noise_variance": self.noise_variance,
            "noise_link": self.noise_link,
            "censor_regions": [[list(iv) for iv in r] for r in self.censor_regions],
            "overlap_scenario": self.overlap_scenario,
            "threshold_scale": self.threshold_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        for key in ("lmc_f", "lmc_g"):
            if isinstance(d.get(key), dict):
                d[key] = LmcSpec.from_dict(d[key])
        return cls(**d)


def inputs(spec: SyntheticSpec) -> np.ndarray:
    return np.linspace(spec.lo, spec.hi, spec.N)[:, None]


def _sample_lmc(X, lmc: LmcSpec, rng) -> np.ndarray:
    """One draw of all outputs, shape ``(N, D)``.

    Built as ``sum_q U_q A_q^T`` with independent columns ``U_q ~ N(0, K_q)``,
    so outputs sharing identical weights come out identical.
    """
    sq = squared_distances(X, X)
    out = np.zeros((len(X), lmc.D))
    for A, kern in zip(lmc.weights, lmc.kernels):
        A = np.asarray(A, float)
        Z = rng.standard_normal((len(X), A.shape[1]))
        if not np.any(A):
            continue
        K = rbf_matrix(sq, kern.log_variance, kern.log_lengthscale)
        L, _ = cholesky_with_jitter(K, name="synthetic prior")
        out += (L @ Z) @ A.T
    return out


def sample_mogp_prior(spec: SyntheticSpec, rng: np.random.Generator, return_latents: bool = False):
    """Draw latent functions and noisy Gaussian outputs; no censoring yet.

    Returns a dataset with ``y = true_y``; with ``return_latents`` also
    ``(f, noise_var)``.
    """
    X = inputs(spec)
    f = spec.mean_offset + _sample_lmc(X, spec.lmc_f, rng)
    if spec.heteroscedastic:
        g = _sample_lmc(X, spec.lmc_g, rng)
        var = np.asarray(link_apply(spec.noise_link, g + spec.noise_offset))
    else:
        var = np.full_like(f, spec.noise_variance)
    y = sample_base([f, var], LikelihoodSpec("gaussian", censored=False), rng)
    ds = CensoredDataset(X=X, y=y, true_y=y.copy(), metadata={"synthetic_spec": spec.to_dict()})
    if return_latents:
        return ds, f, var
    return ds


def _with_censoring(ds: CensoredDataset, y, censored, thresholds, extra: dict) -> CensoredDataset:
    meta = dict(ds.metadata)
    meta["censoring"] = list(meta.get("censoring", [])) + [extra]
    return CensoredDataset(X=ds.X.copy(), y=y, censored=censored, thresholds=thresholds,
                           true_y=ds.true_y.copy(), metadata=meta)


def running_min_threshold(values, scale: float = 0.75) -> np.ndarray:
    """Running minimum shrunk towards minus infinity by ``1 - scale`` of its magnitude.

    Equals ``scale * running_min`` for positive values and never exceeds the
    running minimum, so the threshold stays below every value seen so far.
    """
    m = np.minimum.accumulate(np.asarray(values, float))
    return m - (1.0 - scale) * np.abs(m)


def _contiguous_runs(mask) -> list:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1) + 1
    return np.split(idx, breaks)


def apply_interval_censoring(dataset: CensoredDataset, regions, scale: float = 0.75) -> CensoredDataset:
    """Censor each output inside its input intervals.

    Inside a region the threshold follows :func:`running_min_threshold` of the
    true values from the left edge of the region; censored points get
    ``y = threshold``.  Elsewhere ``y`` is the true value.  Regions refer to
    the first input column.
    """
    if dataset.true_y is None:
        raise DataError("interval censoring needs true_y")
    true = dataset.true_y
    y = true.copy()
    cen = np.zeros_like(y, dtype=bool)
    thr = np.full_like(y, np.nan)
    x = dataset.X[:, 0]
    regions = list(regions) + [[] for _ in range(dataset.D - len(regions))]
    for d, intervals in enumerate(regions):
        for a, b in intervals:
            inside = (x >= a) & (x <= b)
            for run in _contiguous_runs(inside):
                t = running_min_threshold(true[run, d], scale)
                thr[run, d] = t
                y[run, d] = t
                cen[run, d] = True
    return _with_censoring(dataset, y, cen, thr, {"protocol": "interval", "regions": [
        [list(iv) for iv in r] for r in regions], "threshold_scale": scale})


def apply_intensity_censoring(dataset: CensoredDataset, known_censored, c: float) -> CensoredDataset:
    """Flagged points become ``y = (1 - c) * true``, censored at that value."""
    if not 0.0 <= c < 1.0:
        raise ConfigurationError(f"censoring intensity must lie in [0, 1), got {c}")
    if dataset.true_y is None:
        raise DataError("intensity censoring needs true_y")
    flags = np.asarray(known_censored, bool).reshape(dataset.y.shape)
    y = dataset.y.copy()
    y[flags] = (1.0 - c) * dataset.true_y[flags]
    cen = dataset.censored | flags
    thr = dataset.thresholds.copy()
    thr[flags] = y[flags]
    return _with_censoring(dataset, y, cen, thr, {"protocol": "intensity", "c": c})


def supply_proxy_probability(pickups, dropoffs) -> np.ndarray:
    """``P(censored at t) = 1 - sigmoid(dropoffs[t-1] - pickups[t-1] + 5)``; zero at ``t = 0``."""
    pickups = np.asarray(pickups, float)
    dropoffs = np.asarray(dropoffs, float)
    p = np.zeros(pickups.shape)
    p[1:] = 1.0 - expit(dropoffs[:-1] - pickups[:-1] + 5.0)
    return p


def apply_supply_proxy_censoring(pickups, dropoffs, rng: np.random.Generator, integer: bool = True):
    """Censor a demand series using lagged net flow as a supply proxy.

    Returns ``(flags, y)`` where censored steps get ``y ~ U(0, pickups[t])``
    (floored when ``integer``) and other steps keep ``pickups[t]``.
    """
    pickups = np.asarray(pickups, float)
    dropoffs = np.asarray(dropoffs, float)
    if pickups.shape != dropoffs.shape or pickups.ndim != 1:
        raise DataError("pickups and dropoffs must be aligned 1-D series")
    if len(pickups) < 2:
        raise DataError("need at least two time steps")
    for name, s in (("pickups", pickups), ("dropoffs", dropoffs)):
        bad = np.flatnonzero(s < 0)
        if bad.size:
            raise DataError(f"negative count in {name}", row=int(bad[0]) + 1)
    p = supply_proxy_probability(pickups, dropoffs)
    u = rng.random(len(p))
    flags = u < p
    draws = rng.uniform(0.0, 1.0, len(p)) * pickups
    if integer:
        draws = np.floor(draws)
    y = np.where(flags, draws, pickups)
    return flags, y


def censor_with_supply_proxy(dataset: CensoredDataset, dropoffs, rng, rows=None, integer: bool = True
                             ) -> CensoredDataset:
    """Apply :func:`apply_supply_proxy_censoring` to every output.

    ``rows`` restricts censoring to a subset of time steps (e.g. training).
    """
    dropoffs = np.asarray(dropoffs, float).reshape(dataset.y.shape)
    y = dataset.y.copy()
    cen = dataset.censored.copy()
    thr = dataset.thresholds.copy()
    allowed = np.ones(dataset.N, bool) if rows is None else np.isin(np.arange(dataset.N), rows)
    for d in range(dataset.D):
        flags, yd = apply_supply_proxy_censoring(dataset.true_y[:, d], dropoffs[:, d], rng, integer)
        flags &= allowed
        y[flags, d] = yd[flags]
        cen[flags, d] = True
        thr[flags, d] = yd[flags]
    return _with_censoring(dataset, y, cen, thr, {"protocol": "supply_proxy", "integer": integer})


def overlap_fraction(censored) -> float:
    """Share of output-0 censored indices that output 1 also censors."""
    a, b = censored[:, 0], censored[:, 1]
    return float(np.sum(a & b) / max(1, np.sum(a)))


# ---------------------------------------------------------------------------
# ready-made experiments


def synthetic_experiment(spec: SyntheticSpec | None = None) -> CensoredDataset:
    """Draw from the prior and apply interval censoring, seeded by ``spec.seed``."""
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    ds = sample_mogp_prior(spec, rng)
    return apply_interval_censoring(ds, spec.censor_regions, spec.threshold_scale)


def intensity_experiment(c: float, N: int = 100, seed: int = 0, flag_rate: float = 0.3) -> CensoredDataset:
    """Daily two-area demand with supply-limited days cut to ``(1 - c)`` of demand.

    Demand is a positive smooth trend plus a weekly cycle, shared between
    the areas, with Gaussian noise.  Busy days are more likely to be flagged.
    The flags depend on ``seed`` only, not on ``c``.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(N, dtype=float)
    lmc = LmcSpec(weights=[np.array([[6.0, 0.0], [5.0, 3.0]])], kernels=[RbfKernelParams(0.0, np.log(8.0))])
    X = t[:, None]
    trend = _sample_lmc(X, lmc, rng)
    weekly = 6.0 * np.sin(2 * np.pi * t / 7.0)[:, None] * np.array([1.0, 0.8])
    true = 40.0 + trend + weekly + 2.0 * rng.standard_normal((N, 2))
    z = (true - true.mean(0)) / true.std(0)
    flags = rng.random((N, 2)) < flag_rate * 2.0 * expit(2.0 * z)
    feats = np.column_stack([t / 7.0, cyclic_time_features(t, 7.0)])
    ds = CensoredDataset(X=feats, y=true.copy(), true_y=true, metadata={
        "experiment": "intensity", "N": N, "seed": seed, "flag_rate": flag_rate})
    return apply_intensity_censoring(ds, flags, c)


def count_experiment(seed: int = 0, days_train: int = 7, days_test: int = 10, days_val: int = 0,
                     base_rate: float = 8.0, day_level_sd: float = 0.05):
    """Hourly pickups at two correlated stations with supply-proxy censoring.

    Each day's rates are scaled by ``1 + day_level_sd * N(0, 1)``.  Inputs
    are the hour-of-day ``(sin, cos)`` pair.  Returns
    ``(train, validation, test)``; only training steps are censored,
    validation and test hold true demand.  ``validation`` is None when
    ``days_val`` is zero.
    """
    rng = np.random.default_rng(seed)
    T = 24 * (days_train + days_val + days_test)
    t = np.arange(T, dtype=float)
    hour = t % 24
    profile = np.exp(-0.5 * ((hour - 8.0) / 2.0) ** 2) + 0.8 * np.exp(-0.5 * ((hour - 18.0) / 2.5) ** 2)
    evening = np.exp(-0.5 * ((hour - 18.0) / 2.0) ** 2) + 0.8 * np.exp(-0.5 * ((hour - 8.0) / 2.5) ** 2)
    day_level = np.repeat(1.0 + day_level_sd * rng.standard_normal(T // 24), 24)
    scale = np.array([1.0, 0.8])
    rate_pick = base_rate * (0.15 + 1.8 * profile)[:, None] * day_level[:, None] * scale
    rate_drop = base_rate * (0.15 + 1.8 * evening)[:, None] * day_level[:, None] * scale
    pickups = rng.poisson(rate_pick).astype(float)
    dropoffs = rng.poisson(rate_drop).astype(float)
    # the rates depend on the hour of day only, so test days are interpolation
    X = cyclic_time_features(hour, 24.0)
    full = CensoredDataset(X=X, y=pickups.copy(), true_y=pickups, metadata={
        "experiment": "count", "seed": seed, "base_rate": base_rate})
    n_train, n_val = 24 * days_train, 24 * days_val
    train_rows = np.arange(n_train)
    censored = censor_with_supply_proxy(full, dropoffs, rng, rows=train_rows)
    train = censored.subset(train_rows)
    val = full.subset(np.arange(n_train, n_train + n_val)) if n_val else None
    test = full.subset(np.arange(n_train + n_val, T))
    return train, val, test
