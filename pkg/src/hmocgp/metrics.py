"""Predictive metrics and the k-fold evaluation harness."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .data import CensoredDataset
from .exceptions import ConfigurationError, InputShapeError, UndefinedMetricError
from .likelihoods import LikelihoodSpec, base_log_density

METRICS = ("nlpd", "mae", "r2")


def pointwise_log_predictive(samples, y_true, spec: LikelihoodSpec) -> np.ndarray:
    """``log (1/S) sum_s p(y_i | params_{i,s})`` for every point.

    ``samples`` holds ``spec.J`` arrays with a trailing sample axis; their
    leading shape must match ``y_true``.
    """
    y = np.asarray(y_true, dtype=float)
    params = [np.asarray(p, dtype=float) for p in samples]
    if len(params) != spec.J:
        raise InputShapeError(f"{spec.family} needs {spec.J} parameter arrays, got {len(params)}")
    S = params[0].shape[-1]
    if S < 1:
        raise InputShapeError("need at least one predictive sample")
    for p in params:
        if p.shape[:-1] != y.shape:
            raise InputShapeError(f"sample array of shape {p.shape} does not match targets {y.shape}")
    with np.errstate(divide="ignore", under="ignore"):
        logp = np.asarray(base_log_density(y[..., None], params, spec), dtype=float)
    return logsumexp(logp, axis=-1) - np.log(S)


def nlpd(samples, y_true, spec: LikelihoodSpec) -> float:
    """Negative log predictive density summed over all points.

    Uses the base (uncensored) density averaged over samples in probability
    space.  A point with zero density under every sample gives ``inf`` and a
    ``RuntimeWarning`` naming its index.
    """
    lp = pointwise_log_predictive(samples, y_true, spec)
    bad = np.argwhere(~np.isfinite(lp))
    if bad.size:
        warnings.warn(f"zero predictive density at point {tuple(int(i) for i in bad[0])}", RuntimeWarning,
                      stacklevel=2)
        return float("inf")
    return float(-np.sum(lp))


def _pair(y_pred, y_true):
    a = np.asarray(y_pred, dtype=float).ravel()
    b = np.asarray(y_true, dtype=float).ravel()
    if a.shape != b.shape:
        raise InputShapeError(f"length mismatch: {a.size} predictions vs {b.size} targets")
    if a.size == 0:
        raise InputShapeError("empty input")
    return a, b


def mae(y_pred, y_true) -> float:
    a, b = _pair(y_pred, y_true)
    return float(np.mean(np.abs(a - b)))


def r_squared(y_pred, y_true) -> float:
    """Coefficient of determination ``1 - SSE / SST``.

    Raises
    ------
    UndefinedMetricError
        Fewer than two points or constant targets.
    """
    a, b = _pair(y_pred, y_true)
    if a.size < 2:
        raise UndefinedMetricError("R^2 needs at least two points")
    sst = np.sum((b - b.mean()) ** 2)
    if sst == 0:
        raise UndefinedMetricError("R^2 is undefined for constant targets")
    return float(1.0 - np.sum((a - b) ** 2) / sst)


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except UndefinedMetricError:
        return float("nan")


# ---------------------------------------------------------------------------
# folds


def kfold_indices(n: int, k: int, shuffle: bool = False, seed: int = 0) -> list:
    """Test-index blocks of a k-fold split.

    Blocks are contiguous in the input order unless ``shuffle`` is set, in
    which case a seeded permutation is cut into blocks.
    """
    if k < 2:
        raise ConfigurationError("k must be at least 2")
    if n < k:
        raise ConfigurationError(f"cannot split {n} points into {k} folds")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [np.sort(block) for block in np.array_split(order, k)]


# ---------------------------------------------------------------------------
# report


def config_hash(config) -> str:
    text = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    """Per (model, seed, fold, output) metric values plus aggregates.

    ``records`` are dicts with keys ``model, seed, fold, output, metric,
    value``; ``output`` is an integer or ``"all"``.  Out-of-fold predictions
    are kept in ``predictions`` (not serialised) for plot data.
    """

    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict, repr=False)

    @property
    def models(self) -> list:
        seen = []
        for r in self.records:
            if r["model"] not in seen:
                seen.append(r["model"])
        return seen

    def values(self, model, metric, output="all") -> np.ndarray:
        return np.array([r["value"] for r in self.records
                         if r["model"] == model and r["metric"] == metric and r["output"] == output])

    def seed_means(self, model, metric, output="all") -> dict:
        """Per-seed metric, summed over folds for NLPD and averaged otherwise."""
        out = {}
        for r in self.records:
            if r["model"] == model and r["metric"] == metric and r["output"] == output:
                out.setdefault(r["seed"], []).append(r["value"])
        agg = np.sum if metric == "nlpd" else np.nanmean
        return {s: float(agg(v)) for s, v in out.items()}

    def aggregate(self) -> dict:
        """Mean and standard deviation over folds and seeds."""
        groups: dict = {}
        for r in self.records:
            groups.setdefault((r["model"], str(r["output"]), r["metric"]), []).append(r["value"])
        out: dict = {}
        for (model, output, metric), vals in groups.items():
            v = np.asarray(vals, float)
            out.setdefault(model, {}).setdefault(output, {})[metric] = {
                "mean": float(np.nanmean(v)) if np.isfinite(v).any() else float("nan"),
                "std": float(np.nanstd(v)) if np.isfinite(v).any() else float("nan"),
                "n": int(v.size),
            }
        return out

    def table(self, metric: str = "nlpd", output="all") -> list:
        agg = self.aggregate()
        rows = []
        for model in self.models:
            stats = agg[model][str(output)][metric]
            rows.append({"model": model, "mean": stats["mean"], "std": stats["std"]})
        return rows

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "records": self.records, "aggregate": self.aggregate()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "seed", "fold", "output", "metric", "value"])
        for r in self.records:
            w.writerow([r["model"], r["seed"], r["fold"], r["output"], r["metric"], repr(float(r["value"]))])
        return buf.getvalue()

    def table_csv(self, metrics=METRICS) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
        agg = self.aggregate()
        for model in self.models:
            row = [model]
            for m in metrics:
                st = agg[model]["all"][m]
                row += [repr(st["mean"]), repr(st["std"])]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(records=list(d["records"]), metadata=dict(d.get("metadata", {})))


# ---------------------------------------------------------------------------
# harness


def score_prediction(pred, target, point: str = "mean") -> dict:
    """Metrics over all outputs (``"all"``) and per output."""
    y_hat = pred.point(point)
    out = {"all": {
        "nlpd": pred.nlpd(target),
        "mae": mae(y_hat, target),
        "r2": _safe(r_squared, y_hat, target),
    }}
    for d in range(target.shape[1]):
        out[d] = {
            "nlpd": nlpd([s[:, [d]] for s in pred.samples], target[:, [d]], pred.likelihood),
            "mae": mae(y_hat[:, d], target[:, d]),
            "r2": _safe(r_squared, y_hat[:, d], target[:, d]),
        }
    return out


def _named(configs) -> list:
    out = []
    for i, c in enumerate(configs):
        if isinstance(c, tuple):
            out.append(c)
        else:
            out.append((c.name or f"model{i}", c))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"model names must be unique, got {names}")
    return out


def kfold_evaluate(dataset: CensoredDataset, configs, k: int = 5, seeds=(0,), shuffle: bool = False,
                   point: str = "mean", n_samples: int = 100, validation_fraction: float = 0.0,
                   threads: int = 1) -> EvalReport:
    """Fit every config on k-1 folds and score it on the held-out fold.

    ``configs`` is a list of ``ModelConfig`` (named by ``config.name``) or of
    ``(name, ModelConfig)`` pairs.  Each (model, fold, seed) task gets its own
    RNG stream derived from ``(seed, model index, fold)``; results do not
    depend on ``threads``.  With ``validation_fraction > 0`` the tail of each
    training split is held out for early stopping.
    """
    from .model import fit, predict

    named = _named(configs)
    dataset.validate()
    target = dataset.target()
    tasks = []
    for seed in seeds:
        folds = kfold_indices(dataset.N, k, shuffle, seed)
        for fi, test in enumerate(folds):
            train = np.setdiff1d(np.arange(dataset.N), test)
            for mi, (name, cfg) in enumerate(named):
                tasks.append((seed, fi, mi, name, cfg, train, test))

    def run(task):
        seed, fi, mi, name, cfg, train, test = task
        cfg = replace(cfg, training=replace(cfg.training, seed=int(seed)))
        val = None
        if validation_fraction > 0:
            n_val = max(1, int(round(validation_fraction * len(train))))
            train, val_idx = train[:-n_val], train[-n_val:]
            val = dataset.subset(val_idx)
        model = fit(dataset.subset(train), cfg, validation=val, seed_offset=(mi, fi))
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), mi, fi, 1]))
        pred = predict(model, dataset.X[test], n_samples, rng)
        return task, pred, score_prediction(pred, target[test], point)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    report = EvalReport(metadata={
        "mode": "kfold",
        "k": k,
        "seeds": [int(s) for s in seeds],
        "shuffle": shuffle,
        "point_estimate": point,
        "n_samples": n_samples,
        "validation_fraction": validation_fraction,
        "N": dataset.N,
        "D": dataset.D,
        "config_hashes": {name: config_hash(cfg) for name, cfg in named},
    })
    for (seed, fi, mi, name, cfg, train, test), pred, scores in results:
        for output, metrics in scores.items():
            for metric, value in metrics.items():
                report.records.append({"model": name, "seed": int(seed), "fold": fi, "output": output,
                                       "metric": metric, "value": float(value)})
        slot = report.predictions.setdefault(name, {}).setdefault(int(seed), {
            "mean": np.full((dataset.N, dataset.D), np.nan),
            "var": np.full((dataset.N, dataset.D), np.nan),
        })
        slot["mean"][test] = pred.mean
        slot["var"][test] = pred.var
    return report


def reconstruction_evaluate(dataset: CensoredDataset, configs, seeds=(0,), point: str = "mean",
                            n_samples: int = 100, threads: int = 1) -> EvalReport:
    """Fit on the whole (censored) data set and score at the same inputs.

    Scores are taken against ``true_y`` where known, so this measures how well
    a model recovers the uncensored process.  Records use ``fold = 0``.
    """
    from .model import fit, predict

    named = _named(configs)
    dataset.validate()
    target = dataset.target()
    tasks = [(seed, mi, name, cfg) for seed in seeds for mi, (name, cfg) in enumerate(named)]

    def run(task):
        seed, mi, name, cfg = task
        cfg = replace(cfg, training=replace(cfg.training, seed=int(seed)))
        model = fit(dataset, cfg, seed_offset=(mi,))
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), mi, 1]))
        pred = predict(model, dataset.X, n_samples, rng)
        return task, pred, score_prediction(pred, target, point)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    report = EvalReport(metadata={
        "mode": "reconstruction",
        "seeds": [int(s) for s in seeds],
        "point_estimate": point,
        "n_samples": n_samples,
        "N": dataset.N,
        "D": dataset.D,
        "config_hashes": {name: config_hash(cfg) for name, cfg in named},
    })
    for (seed, mi, name, cfg), pred, scores in results:
        for output, metrics in scores.items():
            for metric, value in metrics.items():
                report.records.append({"model": name, "seed": int(seed), "fold": 0, "output": output,
                                       "metric": metric, "value": float(value)})
        report.predictions.setdefault(name, {})[int(seed)] = {"mean": pred.mean, "var": pred.var}
    return report
