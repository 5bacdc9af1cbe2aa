"""Command line front end: ``hmocgp {simulate,fit,predict,evaluate}``.

Every command takes a JSON config (``--config``) carrying
``schema_version: 1``; unknown keys are rejected.  Outputs go to ``--out``
through temporary files and renames, next to a ``run_config.json`` that
records the resolved settings.

Exit codes: 0 success, 2 configuration or input error, 3 numerical or
training failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import CensoredDataset, atomic_write_text, dataset_to_csv_text, load_csv, sidecar_path
from .exceptions import (
    ConfigurationError,
    DataError,
    HmocgpError,
    InputShapeError,
    NonFiniteElboError,
    NonFiniteGradientError,
    NumericalDegeneracyError,
    TrainingDivergenceError,
)
from .metrics import kfold_evaluate, reconstruction_evaluate
from .model import VARIANTS, ModelConfig, TrainedModel, TrainingConfig, fit, predict
from .simulation import SyntheticSpec, count_experiment, intensity_experiment, synthetic_experiment

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

_KEYS = {
    "simulate": {"schema_version", "experiment", "synthetic", "intensity", "count"},
    "fit": {"schema_version", "variant", "model", "validation"},
    "predict": {"schema_version", "n_samples"},
    "evaluate": {"schema_version", "mode", "k", "seeds", "n_seeds", "shuffle", "point_estimate",
                 "n_samples", "validation_fraction", "models", "variants", "likelihood", "training",
                 "plot_data"},
}
_INTENSITY_KEYS = {"c", "N", "flag_rate"}
_COUNT_KEYS = {"days_train", "days_test", "days_val", "base_rate", "day_level_sd"}
_MODEL_ENTRY_KEYS = {"name", "variant", "model"}


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config handling


def read_config(path, command: str) -> dict:
    if path is None:
        return {"schema_version": SCHEMA_VERSION}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise CliError(f"config field 'schema_version' must be {SCHEMA_VERSION}")
    _check_keys(cfg, _KEYS[command], "config")
    return cfg


def _check_keys(d: dict, allowed, where: str):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise CliError(f"unknown field {where}.{unknown[0]}")


def model_config(section: dict | None, variant: str | None, D: int, seed: int | None) -> ModelConfig:
    """Resolve a model config from JSON settings and an optional variant name."""
    section = dict(section or {})
    if variant is not None:
        if variant not in VARIANTS:
            raise CliError(f"unknown variant {variant!r}")
        mo, het, cen = VARIANTS[variant]
        section.update(multi_output=mo, heteroscedastic=het, censored=cen, name=variant)
    lik = section.get("likelihood")
    if isinstance(lik, str):
        section["likelihood"] = {"family": lik}
    if isinstance(section.get("likelihood"), dict):
        section["likelihood"] = {"censored": section.get("censored", True), **section["likelihood"]}
        fam = section["likelihood"].get("family", "gaussian")
        if fam == "poisson" and section.get("heteroscedastic"):
            # the Poisson rate is the only parameter, so there is no noise latent
            section["heteroscedastic"] = False
    section["D"] = D
    training = dict(section.get("training") or {})
    if seed is not None:
        training["seed"] = seed
    section["training"] = training
    try:
        return ModelConfig.from_dict(section)
    except ConfigurationError as exc:
        raise CliError(f"model config: {exc}") from None
    except TypeError as exc:
        raise CliError(f"model config: {exc}") from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_run_config(out: Path, command: str, args, resolved: dict):
    record = {
        "command": command,
        "version": __version__,
        "seed": args.seed,
        "deterministic": args.deterministic,
        "threads": args.threads,
        "variant": getattr(args, "variant", None),
        "resolved": resolved,
    }
    atomic_write_text(out / "run_config.json", _dump(record))


def _load_dataset(path) -> CensoredDataset:
    if path is None:
        raise CliError("--data is required")
    if not Path(path).is_file():
        raise CliError(f"data file not found: {path}")
    return load_csv(path)


def _fmt(v) -> str:
    v = float(v)
    if np.isnan(v):
        return ""
    return repr(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = read_config(args.config, "simulate")
    experiment = cfg.get("experiment", "synthetic")
    seed = args.seed if args.seed is not None else None
    out = Path(args.out)
    files = {}
    if experiment == "synthetic":
        section = dict(cfg.get("synthetic") or {})
        if seed is not None:
            section["seed"] = seed
        try:
            spec = SyntheticSpec.from_dict(section)
        except (ConfigurationError, TypeError) as exc:
            raise CliError(f"synthetic: {exc}") from None
        ds = synthetic_experiment(spec)
        files["dataset.csv"] = ds
        resolved = {"experiment": experiment, "synthetic": spec.to_dict()}
    elif experiment == "intensity":
        section = dict(cfg.get("intensity") or {})
        _check_keys(section, _INTENSITY_KEYS, "intensity")
        if "c" not in section:
            raise CliError("intensity.c is required")
        params = {"seed": seed if seed is not None else 0, **section}
        try:
            ds = intensity_experiment(**params)
        except ConfigurationError as exc:
            raise CliError(f"intensity.c: {exc}") from None
        files["dataset.csv"] = ds
        resolved = {"experiment": experiment, "intensity": params}
    elif experiment == "count":
        section = dict(cfg.get("count") or {})
        _check_keys(section, _COUNT_KEYS, "count")
        params = {"seed": seed if seed is not None else 0, **section}
        train, val, test = count_experiment(**params)
        files["train.csv"] = train
        files["test.csv"] = test
        if val is not None:
            files["validation.csv"] = val
        resolved = {"experiment": experiment, "count": params}
    else:
        raise CliError(f"unknown field value experiment={experiment!r}")
    for name, ds in files.items():
        atomic_write_text(out / name, dataset_to_csv_text(ds))
        atomic_write_text(sidecar_path(out / name), _dump(_json_safe(ds.metadata)))
    _write_run_config(out, "simulate", args, resolved)
    return EXIT_OK


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def cmd_fit(args) -> int:
    cfg = read_config(args.config, "fit")
    ds = _load_dataset(args.data)
    val_path = args.validation or cfg.get("validation")
    val = _load_dataset(val_path) if val_path else None
    variant = args.variant or cfg.get("variant")
    config = model_config(cfg.get("model"), variant, ds.D, args.seed)
    try:
        ds.validate()
    except DataError as exc:
        raise CliError(str(exc)) from None
    model = fit(ds, config, validation=val)
    out = Path(args.out)
    model.save(out / "checkpoint.json")
    atomic_write_text(out / "elbo_trace.csv", _trace_csv(model, ds))
    _write_run_config(out, "fit", args, {"data": str(args.data), "validation": val_path,
                                          "model": config.to_dict()})
    return EXIT_OK


def _trace_csv(model: TrainedModel, ds: CensoredDataset) -> str:
    comps = model.components if model.components is not None else [model]
    rows = []
    for c, comp in enumerate(comps):
        n = ds.N * comp.config.D
        for step, value in enumerate(comp.diagnostics.get("elbo_trace", []), start=1):
            rows.append([c, step, repr(float(value)), repr(float(value) / n)])
    return _csv_text(["component", "step", "elbo", "elbo_per_point"], rows)


def _read_inputs(path) -> np.ndarray:
    if not Path(path).is_file():
        raise CliError(f"inputs file not found: {path}")
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise CliError(f"{path} is empty") from None
    cols = sorted((int(h[1:]), i) for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit())
    if not cols:
        raise CliError(f"{path} has no input columns (x0, x1, ...)")
    rows = []
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            rows.append([float(row[i]) for _, i in cols])
        except (ValueError, IndexError):
            raise CliError(f"{path} row {lineno}: cannot parse inputs") from None
    return np.asarray(rows, float).reshape(len(rows), len(cols))


def prediction_csv(X, pred, D: int, J: int) -> str:
    header = [f"x{k}" for k in range(X.shape[1])]
    for d in range(D):
        for j in range(J):
            header += [f"latent_mean_{j}_{d}", f"latent_var_{j}_{d}"]
        header += [f"pred_mean_{d}", f"pred_var_{d}"]
        for j in range(J):
            header += [f"param_{j}_{d}_q05", f"param_{j}_{d}_q50", f"param_{j}_{d}_q95"]
    rows = []
    if len(X):
        qs = [np.quantile(s, [0.05, 0.5, 0.95], axis=-1) for s in pred.samples]
    for i in range(len(X)):
        row = [_fmt(v) for v in X[i]]
        for d in range(D):
            for j in range(J):
                row += [_fmt(pred.latent_mean[j, i, d]), _fmt(pred.latent_var[j, i, d])]
            row += [_fmt(pred.mean[i, d]), _fmt(pred.var[i, d])]
            for j in range(J):
                row += [_fmt(qs[j][k, i, d]) for k in range(3)]
        rows.append(row)
    return _csv_text(header, rows)


def cmd_predict(args) -> int:
    cfg = read_config(args.config, "predict")
    if args.checkpoint is None or args.inputs is None:
        raise CliError("--checkpoint and --inputs are required")
    if not Path(args.checkpoint).is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    try:
        model = TrainedModel.load(args.checkpoint)
    except (json.JSONDecodeError, KeyError) as exc:
        raise CliError(f"malformed checkpoint: {exc}") from None
    X = _read_inputs(args.inputs)
    n_samples = int(cfg.get("n_samples", 100))
    J = model.config.likelihood.J
    D = model.D
    if len(X) == 0:
        pred = None
        text = prediction_csv(X, pred, D, J)
    else:
        rng = np.random.default_rng(args.seed if args.seed is not None else 0)
        pred = predict(model, X, n_samples, rng)
        text = prediction_csv(X, pred, D, J)
    out = Path(args.out)
    atomic_write_text(out / "predictions.csv", text)
    _write_run_config(out, "predict", args, {"checkpoint": str(args.checkpoint), "inputs": str(args.inputs),
                                              "n_samples": n_samples})
    return EXIT_OK


def _eval_configs(cfg: dict, D: int, variant: str | None) -> list:
    base_training = cfg.get("training") or {}
    if not isinstance(base_training, dict):
        raise CliError("training must be an object")
    likelihood = cfg.get("likelihood")
    entries = []
    if variant is not None:
        entries.append({"variant": variant})
    elif "models" in cfg:
        for i, entry in enumerate(cfg["models"]):
            if not isinstance(entry, dict):
                raise CliError(f"models[{i}] must be an object")
            _check_keys(entry, _MODEL_ENTRY_KEYS, f"models[{i}]")
            entries.append(entry)
    else:
        entries = [{"variant": v} for v in cfg.get("variants", list(VARIANTS))]
    out = []
    for entry in entries:
        section = dict(entry.get("model") or {})
        if likelihood is not None and "likelihood" not in section:
            section["likelihood"] = likelihood
        section["training"] = {**base_training, **(section.get("training") or {})}
        mc = model_config(section, entry.get("variant"), D, None)
        name = entry.get("name") or entry.get("variant") or mc.name
        if name is None:
            raise CliError("every model needs a name or a variant")
        out.append((name, mc))
    return out


def _seeds(cfg: dict, seed: int | None) -> list:
    if "n_seeds" in cfg:
        start = seed if seed is not None else 0
        return list(range(start, start + int(cfg["n_seeds"])))
    if seed is not None:
        return [seed]
    return [int(s) for s in cfg.get("seeds", [0])]


def plot_data_csv(ds: CensoredDataset, mean, var, d: int) -> str:
    order = np.argsort(ds.X[:, 0], kind="stable")
    target = ds.true_y if ds.true_y is not None else np.full_like(ds.y, np.nan)
    rows = []
    for i in order:
        sd = np.sqrt(var[i, d])
        rows.append([_fmt(ds.X[i, 0]), _fmt(mean[i, d]), _fmt(mean[i, d] - 2 * sd), _fmt(mean[i, d] + 2 * sd),
                     _fmt(ds.y[i, d]), "1" if ds.censored[i, d] else "0", _fmt(target[i, d])])
    return _csv_text(["x", "pred_mean", "pred_lo", "pred_hi", "y_obs", "censored", "y_true"], rows)


def cmd_evaluate(args) -> int:
    cfg = read_config(args.config, "evaluate")
    ds = _load_dataset(args.data)
    try:
        ds.validate()
    except DataError as exc:
        raise CliError(str(exc)) from None
    configs = _eval_configs(cfg, ds.D, args.variant)
    seeds = _seeds(cfg, args.seed)
    mode = cfg.get("mode", "kfold")
    point = cfg.get("point_estimate", "mean")
    n_samples = int(cfg.get("n_samples", 100))
    try:
        if mode == "kfold":
            report = kfold_evaluate(ds, configs, k=int(cfg.get("k", 5)), seeds=seeds,
                                    shuffle=bool(cfg.get("shuffle", False)), point=point, n_samples=n_samples,
                                    validation_fraction=float(cfg.get("validation_fraction", 0.0)),
                                    threads=args.threads)
        elif mode == "reconstruction":
            report = reconstruction_evaluate(ds, configs, seeds=seeds, point=point, n_samples=n_samples,
                                             threads=args.threads)
        else:
            raise CliError(f"unknown field value mode={mode!r}")
    except ConfigurationError as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out)
    atomic_write_text(out / "report.json", report.to_json())
    atomic_write_text(out / "report.csv", report.to_csv())
    atomic_write_text(out / "table.csv", report.table_csv())
    if cfg.get("plot_data", True):
        for name, per_seed in report.predictions.items():
            for seed, p in per_seed.items():
                for d in range(ds.D):
                    atomic_write_text(out / "plot_data" / f"{name}_seed{seed}_output{d}.csv",
                                      plot_data_csv(ds, p["mean"], p["var"], d))
    _write_run_config(out, "evaluate", args, {
        "data": str(args.data), "mode": mode, "seeds": seeds, "point_estimate": point,
        "models": {name: mc.to_dict() for name, mc in configs}, "metadata": report.metadata})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmocgp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="global seed (non-negative)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for evaluate")
    common.add_argument("--deterministic", action="store_true",
                        help="pin numerical libraries to one thread for byte-identical outputs")
    common.add_argument("--variant", choices=sorted(VARIANTS), help="model variant")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic data set")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="train a model and write a checkpoint")
    p.add_argument("--data", help="training CSV")
    p.add_argument("--validation", help="validation CSV for early stopping")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="predict from a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint JSON")
    p.add_argument("--inputs", help="CSV with x0, x1, ... columns")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="k-fold or reconstruction evaluation")
    p.add_argument("--data", help="data set CSV")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _thread_limit(deterministic: bool):
    if not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_INPUT
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        with _thread_limit(args.deterministic), np.errstate(all="ignore"):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (TrainingDivergenceError, NumericalDegeneracyError, NonFiniteElboError,
            NonFiniteGradientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigurationError, InputShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except HmocgpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
