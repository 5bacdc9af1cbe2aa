"""Censored multi-output datasets and their CSV representation.

CSV layout (UTF-8, header row, ``.`` decimal separator)::

    x0,...,xp, y_0,...,y_{D-1} [, cen_d] [, thr_d] [, true_d]

``cen_d`` is 0/1, ``thr_d`` the censoring threshold (blank when absent) and
``true_d`` the uncensored value when known.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CensoringInvariantError, CsvParseError, DataError, SchemaError


@dataclass
class CensoredDataset:
    """Inputs, (possibly censored) outputs and censoring bookkeeping.

    Attributes
    ----------
    X : (N, p) array
    y : (N, D) array
        Observed outputs; equal to the threshold where censored.
    censored : (N, D) bool array
    thresholds : (N, D) array
        NaN where no threshold is known.
    true_y : (N, D) array or None
        Uncensored values, when available.
    """

    X: np.ndarray
    y: np.ndarray
    censored: np.ndarray | None = None
    thresholds: np.ndarray | None = None
    true_y: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        n, D = self.y.shape
        if self.X.shape[0] != n:
            raise DataError(f"X has {self.X.shape[0]} rows but y has {n}")
        if self.censored is None:
            self.censored = np.zeros((n, D), dtype=bool)
        self.censored = np.asarray(self.censored, dtype=bool).reshape(n, D)
        if self.thresholds is None:
            self.thresholds = np.where(self.censored, self.y, np.nan)
        self.thresholds = np.asarray(self.thresholds, dtype=float).reshape(n, D)
        if self.true_y is not None:
            self.true_y = np.asarray(self.true_y, dtype=float).reshape(n, D)

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def D(self) -> int:
        return self.y.shape[1]

    def validate(self) -> "CensoredDataset":
        """Check the right-censoring invariants; raise with a 1-based row number."""
        for i in range(self.N):
            for d in range(self.D):
                y, thr = self.y[i, d], self.thresholds[i, d]
                if self.censored[i, d]:
                    if not y == thr:
                        raise CensoringInvariantError(
                            f"output {d} is flagged censored but y={y!r} differs from threshold {thr!r}",
                            row=i + 1)
                elif np.isfinite(thr) and not y < thr:
                    raise CensoringInvariantError(
                        f"output {d} is not censored but y={y!r} is not below threshold {thr!r}", row=i + 1)
                if self.true_y is not None and np.isfinite(self.true_y[i, d]) and self.true_y[i, d] < y:
                    raise CensoringInvariantError(
                        f"output {d}: observed {y!r} exceeds the true value {self.true_y[i, d]!r}", row=i + 1)
        return self

    def subset(self, idx) -> "CensoredDataset":
        idx = np.asarray(idx)
        return CensoredDataset(
            X=self.X[idx], y=self.y[idx], censored=self.censored[idx],
            thresholds=self.thresholds[idx],
            true_y=None if self.true_y is None else self.true_y[idx],
            metadata=dict(self.metadata),
        )

    def output(self, d: int) -> "CensoredDataset":
        """Single-output view of output ``d``."""
        return CensoredDataset(
            X=self.X, y=self.y[:, [d]], censored=self.censored[:, [d]],
            thresholds=self.thresholds[:, [d]],
            true_y=None if self.true_y is None else self.true_y[:, [d]],
            metadata=dict(self.metadata),
        )

    def target(self) -> np.ndarray:
        """Values to score predictions against: ``true_y`` when known, else ``y``."""
        if self.true_y is None:
            return self.y
        return np.where(np.isfinite(self.true_y), self.true_y, self.y)


# ---------------------------------------------------------------------------
# CSV


def _fmt(v: float) -> str:
    if not np.isfinite(v):
        return "" if np.isnan(v) else repr(float(v))
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _default_schema(header):
    def numbered(prefix):
        found = {}
        for col in header:
            m = re.fullmatch(prefix + r"(\d+)", col)
            if m:
                found[int(m.group(1))] = col
        return [found[k] for k in sorted(found)]

    return {
        "inputs": numbered("x"),
        "outputs": numbered("y_"),
        "censored": numbered("cen_"),
        "thresholds": numbered("thr_"),
        "true": numbered("true_"),
    }


def load_csv(path, schema: dict | None = None) -> CensoredDataset:
    """Read a dataset written in the package CSV layout.

    ``schema`` may override column names with keys ``inputs``, ``outputs``,
    ``censored``, ``thresholds`` and ``true`` (lists of column names).  Missing
    optional columns mean "uncensored" / "unknown".

    Raises
    ------
    CsvParseError, SchemaError, CensoringInvariantError
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CsvParseError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CsvParseError(f"{path} is empty") from None
    header = [h.strip() for h in header]
    cols = _default_schema(header)
    if schema:
        unknown = set(schema) - set(cols)
        if unknown:
            raise SchemaError(f"unknown schema keys {sorted(unknown)}")
        cols.update({k: list(v) for k, v in schema.items()})
    missing = [c for group in cols.values() for c in group if c not in header]
    if missing:
        raise SchemaError(f"columns not found in header: {missing}")
    if not cols["inputs"]:
        raise SchemaError("no input columns (x0, x1, ...)")
    if not cols["outputs"]:
        raise SchemaError("no output columns (y_0, y_1, ...)")
    D = len(cols["outputs"])
    for key in ("censored", "thresholds", "true"):
        if cols[key] and len(cols[key]) != D:
            raise SchemaError(f"expected {D} {key} columns, got {len(cols[key])}")
    pos = {h: i for i, h in enumerate(header)}
    rows = []
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise CsvParseError(f"expected {len(header)} fields, got {len(row)}", row=lineno)
        rows.append((lineno, row))

    def grab(names, lineno, row, blank_ok):
        out = []
        for name in names:
            cell = row[pos[name]].strip()
            if cell == "":
                if blank_ok:
                    out.append(np.nan)
                    continue
                raise CsvParseError(f"empty value in column {name!r}", row=lineno)
            try:
                out.append(float(cell))
            except ValueError:
                raise CsvParseError(f"cannot parse {cell!r} in column {name!r}", row=lineno) from None
        return out

    n = len(rows)
    X = np.empty((n, len(cols["inputs"])))
    y = np.empty((n, D))
    cen = np.zeros((n, D), dtype=bool)
    thr = np.full((n, D), np.nan)
    true = np.full((n, D), np.nan) if cols["true"] else None
    for i, (lineno, row) in enumerate(rows):
        X[i] = grab(cols["inputs"], lineno, row, False)
        y[i] = grab(cols["outputs"], lineno, row, False)
        if cols["censored"]:
            flags = grab(cols["censored"], lineno, row, False)
            if any(f not in (0.0, 1.0) for f in flags):
                raise CsvParseError("censoring flags must be 0 or 1", row=lineno)
            cen[i] = np.asarray(flags) == 1.0
        if cols["thresholds"]:
            thr[i] = grab(cols["thresholds"], lineno, row, True)
        if true is not None:
            true[i] = grab(cols["true"], lineno, row, True)
    if not cols["thresholds"]:
        thr = np.where(cen, y, np.nan)
    ds = CensoredDataset(X=X, y=y, censored=cen, thresholds=thr, true_y=true)
    ds.metadata["schema"] = cols
    for i in range(n):
        for d in range(D):
            if cen[i, d] and not y[i, d] == thr[i, d]:
                raise CensoringInvariantError(
                    f"output {d} flagged censored but y={y[i, d]!r} differs from threshold {thr[i, d]!r}",
                    row=rows[i][0])
    return ds


def dataset_to_csv_text(ds: CensoredDataset, include_true: bool = True) -> str:
    p, D = ds.X.shape[1], ds.D
    header = [f"x{k}" for k in range(p)] + [f"y_{d}" for d in range(D)]
    header += [f"cen_{d}" for d in range(D)] + [f"thr_{d}" for d in range(D)]
    with_true = include_true and ds.true_y is not None
    if with_true:
        header += [f"true_{d}" for d in range(D)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i in range(ds.N):
        row = [_fmt(v) for v in ds.X[i]] + [_fmt(v) for v in ds.y[i]]
        row += ["1" if c else "0" for c in ds.censored[i]]
        row += [_fmt(v) for v in ds.thresholds[i]]
        if with_true:
            row += [_fmt(v) for v in ds.true_y[i]]
        w.writerow(row)
    return buf.getvalue()


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_csv(path, ds: CensoredDataset, metadata: dict | None = None) -> Path:
    """Write ``ds`` (and a ``.meta.json`` sidecar when ``metadata`` is given)."""
    atomic_write_text(path, dataset_to_csv_text(ds))
    if metadata is not None:
        atomic_write_text(sidecar_path(path), json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return Path(path)


# ---------------------------------------------------------------------------
# feature helpers


def cyclic_time_features(steps, period: float) -> np.ndarray:
    """``(sin, cos)`` encoding of integer time steps with the given period."""
    steps = np.asarray(steps, dtype=float)
    angle = 2.0 * np.pi * steps / period
    return np.column_stack([np.sin(angle), np.cos(angle)])


def timestamps_to_features(timestamps, start=None) -> np.ndarray:
    """Hourly step index plus hour-of-day and day-of-week cyclic columns.

    ``timestamps`` are anything :func:`numpy.datetime64` accepts.
    """
    ts = np.asarray(timestamps, dtype="datetime64[h]")
    origin = ts.min() if start is None else np.datetime64(start, "h")
    step = (ts - origin).astype(np.int64).astype(float)
    hours = ts.astype(np.int64)
    hour_of_day = hours % 24
    # 1970-01-01 was a Thursday; shift so Monday is 0
    day_of_week = ((hours // 24) + 3) % 7
    return np.column_stack([
        step,
        cyclic_time_features(hour_of_day, 24.0),
        cyclic_time_features(day_of_week, 7.0),
    ])


def pearson_pairing(Y) -> list[int]:
    """For each column of ``Y``, the index of its most correlated other column."""
    Y = np.asarray(Y, dtype=float)
    C = np.corrcoef(Y, rowvar=False)
    np.fill_diagonal(C, -np.inf)
    return [int(np.argmax(C[i])) for i in range(C.shape[0])]
