"""Loading, transforming and windowing quarterly macro panels."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

OPS = ("level", "diff", "log-diff", "double-log-diff")
_ORDER = {"level": 0, "diff": 1, "log-diff": 1, "double-log-diff": 2}
_QUARTER = re.compile(r"^\s*(\d{4})\s*[:\-]?\s*[Qq]([1-4])\s*$")
_QUARTER_END = {1: "03-31", 2: "06-30", 3: "09-30", 4: "12-31"}


class DataError(ValueError):
    pass


def parse_date(label) -> np.datetime64:
    """ISO-8601 date, or a quarter label such as ``1959Q1``/``1959:Q1`` mapped to quarter end."""
    if isinstance(label, np.datetime64):
        return label.astype("datetime64[D]")
    text = str(label).strip()
    m = _QUARTER.match(text)
    if m:
        return np.datetime64(f"{m.group(1)}-{_QUARTER_END[int(m.group(2))]}", "D")
    try:
        return np.datetime64(text, "D")
    except ValueError as exc:
        raise DataError(f"unparseable date {label!r}") from exc


def quarter_label(date: np.datetime64) -> str:
    y, m = str(date.astype("datetime64[M]")).split("-")
    return f"{y}Q{(int(m) - 1) // 3 + 1}"


@dataclass(frozen=True)
class SeriesPanel:
    values: np.ndarray
    dates: np.ndarray
    names: tuple
    transform_log: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        dates = np.array([parse_date(d) for d in self.dates], dtype="datetime64[D]")
        names = tuple(str(n) for n in self.names)
        if values.shape[0] < 2:
            raise DataError("a panel needs at least 2 observations")
        if values.shape != (len(dates), len(names)):
            raise DataError(f"values {values.shape} inconsistent with {len(dates)} dates, {len(names)} names")
        if not np.all(np.isfinite(values)):
            raise DataError("panel contains missing or non-finite values")
        if np.any(np.diff(dates) <= np.timedelta64(0, "D")):
            raise DataError("dates must be strictly increasing")
        values.setflags(write=False)
        dates.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "transform_log", tuple(self.transform_log))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def index_of(self, date) -> int:
        if isinstance(date, (int, np.integer)):
            return int(date)
        d = parse_date(date)
        idx = np.searchsorted(self.dates, d)
        if idx >= self.T or self.dates[idx] != d:
            raise DataError(f"date {date} not in panel")
        return int(idx)

    def slice(self, start: int, stop: int) -> "SeriesPanel":
        return SeriesPanel(self.values[start:stop], self.dates[start:stop], self.names, self.transform_log)

    def transform_log_json(self) -> str:
        return json.dumps(list(self.transform_log), indent=2)


def load_panel(path, date_column: str | None = None, columns: Sequence[str] | None = None) -> SeriesPanel:
    """Read a CSV with a header row, one date column and numeric series columns.

    Args:
        path: CSV file.
        date_column: name of the date column; defaults to the first column.
        columns: subset and order of series to keep; defaults to all others.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: header and at least one data row required")
    header = [h.strip() for h in rows[0]]
    date_col = header.index(date_column) if date_column else 0
    series = [h for i, h in enumerate(header) if i != date_col]
    if columns is not None:
        missing = set(columns) - set(series)
        if missing:
            raise DataError(f"{path}: columns not found: {sorted(missing)}")
        series = list(columns)
    col_idx = [header.index(s) for s in series]
    dates, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
        try:
            dates.append(parse_date(row[date_col]))
        except DataError as exc:
            raise DataError(f"{path}: row {lineno}, column {header[date_col]!r}: {exc}") from None
        vals = []
        for j, name in zip(col_idx, series):
            cell = row[j].strip()
            try:
                v = float(cell)
            except ValueError:
                v = float("nan")
            if not np.isfinite(v):
                raise DataError(f"{path}: row {lineno}, column {name!r}: non-numeric or missing cell {cell!r}")
            vals.append(v)
        values.append(vals)
    dates = np.array(dates, dtype="datetime64[D]")
    if np.any(np.diff(dates) <= np.timedelta64(0, "D")):
        bad = int(np.argmax(np.diff(dates) <= np.timedelta64(0, "D"))) + 3
        raise DataError(f"{path}: duplicate or non-monotone date at row {bad}")
    return SeriesPanel(np.array(values), dates, tuple(series),
                       ({"step": "load", "path": str(path), "T": len(dates), "n": len(series)},))


@dataclass(frozen=True)
class TransformSpec:
    """Per-series stationarity transform plus optional demeaning and scaling.

    ``demean_window`` of None demeans with the full transformed sample; a
    (start, end) pair restricts the mean to that window instead.
    """

    ops: tuple
    demean: bool = True
    standardize_window: tuple | None = None
    demean_window: tuple | None = None

    def __post_init__(self):
        ops = tuple(self.ops)
        bad = [o for o in ops if o not in OPS]
        if bad:
            raise ValueError(f"unknown transform ops {bad}; choose from {OPS}")
        object.__setattr__(self, "ops", ops)


def _window_mask(dates, window, what):
    start, end = parse_date(window[0]), parse_date(window[1])
    if end < start:
        raise DataError(f"{what} ends before it starts")
    mask = (dates >= start) & (dates <= end)
    return mask


def transform(panel: SeriesPanel, spec: TransformSpec) -> SeriesPanel:
    """Apply the per-series transforms, then demean and standardise.

    Leading rows lost to differencing are dropped for all series (the largest
    difference order wins). The log records enough to invert the transform.
    """
    if len(spec.ops) != panel.n:
        raise DataError(f"{len(spec.ops)} transform ops for {panel.n} series")
    order = max(_ORDER[o] for o in spec.ops)
    if panel.T - order < 2:
        raise DataError("panel too short for the requested differences")
    x = panel.values
    out = np.empty((panel.T - order, panel.n))
    for j, op in enumerate(spec.ops):
        col = x[:, j]
        if op in ("log-diff", "double-log-diff"):
            if np.any(col <= 0):
                bad = int(np.argmax(col <= 0))
                raise DataError(f"series {panel.names[j]!r}: non-positive value at {panel.dates[bad]} under {op}")
            col = np.log(col)
        if op == "level":
            t = col
        elif op in ("diff", "log-diff"):
            t = np.diff(col)
        else:
            t = np.diff(col, n=2)
        out[:, j] = t[len(t) - out.shape[0]:]
    dates = panel.dates[order:]
    log = list(panel.transform_log)
    log.append({"step": "transform", "ops": list(spec.ops), "dropped_rows": order,
                "initial_values": x[:order].tolist()})
    if spec.demean:
        if spec.demean_window is not None:
            mask = _window_mask(dates, spec.demean_window, "demean_window")
            if not mask.any():
                raise DataError("demean_window contains no observations")
            mean = out[mask].mean(axis=0)
        else:
            mean = out.mean(axis=0)
        out = out - mean
        log.append({"step": "demean", "mean": mean.tolist(),
                    "window": None if spec.demean_window is None else [str(w) for w in spec.demean_window]})
    if spec.standardize_window is not None:
        mask = _window_mask(dates, spec.standardize_window, "standardize_window")
        if mask.sum() < 2:
            raise DataError("standardize_window must contain at least 2 observations")
        std = out[mask].std(axis=0, ddof=1)
        if np.any(std == 0):
            raise DataError("zero standard deviation inside standardize_window")
        out = out / std
        log.append({"step": "standardize", "std": std.tolist(), "ddof": 1,
                    "window": [str(w) for w in spec.standardize_window]})
    return SeriesPanel(out, dates, panel.names, tuple(log))


def inverse_transform(panel: SeriesPanel, prefix_dates=None) -> np.ndarray:
    """Undo the logged transform; returns the original-scale values including dropped rows."""
    x = np.array(panel.values, dtype=float)
    steps = [s for s in panel.transform_log if s["step"] in ("transform", "demean", "standardize")]
    if not steps or steps[0]["step"] != "transform":
        raise DataError("panel carries no invertible transform record")
    for step in reversed(steps[1:]):
        if step["step"] == "standardize":
            x = x * np.asarray(step["std"])
        elif step["step"] == "demean":
            x = x + np.asarray(step["mean"])
    rec = steps[0]
    init = np.asarray(rec["initial_values"], dtype=float).reshape(rec["dropped_rows"], panel.n)
    order = rec["dropped_rows"]
    full = np.empty((order + x.shape[0], panel.n))
    for j, op in enumerate(rec["ops"]):
        head = init[:, j]
        if op == "level":
            full[:, j] = np.concatenate([head, x[:, j]])
            continue
        logged = op != "diff"
        h = np.log(head) if logged else head
        if op in ("diff", "log-diff"):
            level = np.concatenate([h, h[-1] + np.cumsum(x[:, j])])
        else:
            d1 = h[-1] - h[-2]
            dlog = d1 + np.cumsum(x[:, j])
            level = np.concatenate([h, h[-1] + np.cumsum(dlog)])
        full[:, j] = np.exp(level) if logged else level
    return full


@dataclass(frozen=True)
class EvalWindow:
    origin: np.datetime64
    origin_index: int
    train_range: tuple
    horizons: tuple = field(default=())


def expanding_windows(panel: SeriesPanel, first_origin, h_max: int) -> list[EvalWindow]:
    """One expanding training window per forecast origin, from ``first_origin`` to the
    second-to-last date; horizons are truncated to the observations left."""
    if h_max < 1:
        raise ValueError("h_max must be at least 1")
    start = panel.index_of(first_origin)
    if start >= panel.T - 1:
        raise DataError(f"first origin {first_origin} leaves no future observation to forecast")
    windows = []
    for idx in range(start, panel.T - 1):
        hs = tuple(range(1, min(h_max, panel.T - 1 - idx) + 1))
        windows.append(EvalWindow(panel.dates[idx], idx, (panel.dates[0], panel.dates[idx]), hs))
    return windows
