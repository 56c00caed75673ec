"""Paired survival / longitudinal tables: loading, validation, landmarking.

A :class:`Dataset` holds two pandas frames with canonical column names:

* ``survival``: ``id``, ``time``, ``event`` and the baseline covariates;
* ``longitudinal``: ``id``, ``fuptime``, the regressors used to build mixed
  model design rows, and the longitudinal covariates (missing cells as NaN).

Subject ids are kept as strings so that arbitrary identifiers round-trip.
"""

from __future__ import annotations

import io
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

NA_VALUES = ["", "NA", "NaN", "nan"]


class DataError(ValueError):
    """Invalid input data; the message names the offending row/column."""


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function.

    ``values[k]`` holds on ``[knots[k], knots[k+1])`` and
    ``value_before_first_knot`` on ``(-inf, knots[0])``.
    """

    knots: np.ndarray
    values: np.ndarray
    value_before_first_knot: float = 0.0

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if knots.shape != values.shape or knots.ndim != 1:
            raise ValueError("knots and values must be 1-d arrays of equal length")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        padded = np.concatenate(([self.value_before_first_knot], self.values))
        return padded[idx + 1]

    def left_limit(self, t):
        """Value just before ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="left") - 1
        padded = np.concatenate(([self.value_before_first_knot], self.values))
        return padded[idx + 1]

    def to_frame(self, value_name="value"):
        return pd.DataFrame({"time": self.knots, value_name: self.values})


@dataclass(frozen=True)
class Schema:
    """Column roles for the two input tables.

    ``baseline``, ``longitudinal`` and ``regressors`` may be left ``None``:
    baseline then defaults to every other survival column and longitudinal to
    every longitudinal column that is not a regressor. ``levels`` optionally
    fixes the level order of categorical baseline covariates (first level is
    the reference); otherwise levels are sorted alphabetically.
    """

    id: str = "id"
    time: str = "time"
    event: str = "event"
    fuptime: str = "fuptime"
    baseline: Sequence[str] | None = None
    longitudinal: Sequence[str] | None = None
    regressors: Sequence[str] | None = ()
    levels: Mapping[str, Sequence[str]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Dataset:
    survival: pd.DataFrame
    longitudinal: pd.DataFrame
    baseline: tuple = ()
    longitudinal_vars: tuple = ()
    regressors: tuple = ()
    levels: Mapping[str, tuple] = field(default_factory=dict)
    landmark: float | None = None

    @property
    def ids(self):
        return self.survival["id"].to_numpy()

    @property
    def n(self):
        return len(self.survival)

    @property
    def categorical(self):
        return tuple(b for b in self.baseline if b in self.levels)

    def schema(self):
        """Schema that reloads this dataset's serialized form."""
        return Schema(
            baseline=list(self.baseline),
            longitudinal=list(self.longitudinal_vars),
            regressors=list(self.regressors),
            levels={k: list(v) for k, v in self.levels.items()},
        )

    def subset(self, ids):
        """Dataset restricted to ``ids`` (kept in the given order)."""
        ids = [str(i) for i in ids]
        surv = self.survival.set_index("id").loc[ids].reset_index()
        long = self.longitudinal[self.longitudinal["id"].isin(set(ids))]
        return replace(self, survival=surv, longitudinal=long.reset_index(drop=True))

    def equals(self, other):
        return (
            self.baseline == other.baseline
            and self.longitudinal_vars == other.longitudinal_vars
            and self.regressors == other.regressors
            and dict(self.levels) == dict(other.levels)
            and self.landmark == other.landmark
            and self.survival.equals(other.survival)
            and self.longitudinal.equals(other.longitudinal)
        )


def _read_table(source):
    if isinstance(source, pd.DataFrame):
        source = io.StringIO(_format_frame(source))
    return pd.read_csv(source, dtype=str, na_values=NA_VALUES, keep_default_na=False).fillna("")


def _to_float(raw):
    # astype(float) parses with correct rounding, unlike pd.to_numeric's fast path
    try:
        return raw.where(raw != "", "nan").astype(float)
    except ValueError:
        return pd.to_numeric(raw.where(raw != "", None), errors="coerce")


def _numeric(frame, col, table, allow_missing):
    raw = frame[col]
    values = _to_float(raw)
    bad = values.isna() & (raw != "")
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(
            f"{table} table: non-numeric value {raw.iloc[row]!r} in column {col!r} "
            f"at data row {row + 1}"
        )
    if not allow_missing and values.isna().any():
        row = int(np.flatnonzero(values.isna().to_numpy())[0])
        raise DataError(f"{table} table: missing value in column {col!r} at data row {row + 1}")
    return values.astype(float)


def _require(frame, cols, table):
    for c in cols:
        if c not in frame.columns:
            raise DataError(f"{table} table: missing mandatory column {c!r}")


def load_dataset(survival_source, longitudinal_source, schema=None):
    """Read and validate a survival table and a long-format longitudinal table.

    Sources may be paths, text streams or data frames. Raises :class:`DataError`
    with the row/column location of the first problem found.
    """
    schema = schema or Schema()
    surv_raw = _read_table(survival_source)
    long_raw = _read_table(longitudinal_source)
    _require(surv_raw, [schema.id, schema.time, schema.event], "survival")
    _require(long_raw, [schema.id, schema.fuptime], "longitudinal")

    reserved_s = {schema.id, schema.time, schema.event}
    baseline = list(schema.baseline) if schema.baseline is not None else [
        c for c in surv_raw.columns if c not in reserved_s
    ]
    regressors = list(schema.regressors or ())
    reserved_l = {schema.id, schema.fuptime}
    longvars = list(schema.longitudinal) if schema.longitudinal is not None else [
        c for c in long_raw.columns if c not in reserved_l and c not in regressors
    ]
    _require(surv_raw, baseline, "survival")
    _require(long_raw, regressors + longvars, "longitudinal")

    ids = surv_raw[schema.id]
    if (ids == "").any():
        raise DataError(f"survival table: empty id at data row {int(np.flatnonzero(ids == '')[0]) + 1}")
    dup = ids.duplicated()
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise DataError(f"survival table: duplicated id {ids.iloc[row]!r} at data row {row + 1}")

    time = _numeric(surv_raw, schema.time, "survival", allow_missing=False)
    if (time < 0).any():
        row = int(np.flatnonzero((time < 0).to_numpy())[0])
        raise DataError(f"survival table: negative time in column {schema.time!r} at data row {row + 1}")
    event = _numeric(surv_raw, schema.event, "survival", allow_missing=False)
    bad = ~event.isin([0.0, 1.0])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(
            f"survival table: event value {surv_raw[schema.event].iloc[row]!r} outside {{0,1}} "
            f"in column {schema.event!r} at data row {row + 1}"
        )

    surv = pd.DataFrame({"id": ids.to_numpy(), "time": time.to_numpy(), "event": event.astype(int).to_numpy()})
    levels = {}
    for b in baseline:
        raw = surv_raw[b]
        numeric = _to_float(raw)
        is_cat = b in schema.levels or ((numeric.isna() & (raw != "")).any())
        if is_cat:
            observed = sorted(set(raw[raw != ""]))
            lv = list(schema.levels.get(b, observed))
            unseen = set(observed) - set(lv)
            if unseen:
                raise DataError(f"survival table: column {b!r} has levels {sorted(unseen)} not in declared levels")
            levels[b] = tuple(lv)
            surv[b] = raw.where(raw != "", None).to_numpy(dtype=object)
        else:
            surv[b] = numeric.to_numpy(dtype=float)

    long_ids = long_raw[schema.id]
    known = set(surv["id"])
    unknown = ~long_ids.isin(known)
    if unknown.any():
        row = int(np.flatnonzero(unknown.to_numpy())[0])
        raise DataError(
            f"longitudinal table: id {long_ids.iloc[row]!r} at data row {row + 1} "
            f"is absent from the survival table"
        )
    fup = _numeric(long_raw, schema.fuptime, "longitudinal", allow_missing=False)
    if (fup < 0).any():
        row = int(np.flatnonzero((fup < 0).to_numpy())[0])
        raise DataError(f"longitudinal table: negative {schema.fuptime!r} at data row {row + 1}")
    long = pd.DataFrame({"id": long_ids.to_numpy(), "fuptime": fup.to_numpy()})
    for c in regressors:
        long[c] = _numeric(long_raw, c, "longitudinal", allow_missing=True).to_numpy()
    for c in longvars:
        long[c] = _numeric(long_raw, c, "longitudinal", allow_missing=True).to_numpy()

    return Dataset(
        survival=surv,
        longitudinal=long,
        baseline=tuple(baseline),
        longitudinal_vars=tuple(longvars),
        regressors=tuple(regressors),
        levels=levels,
    )


def _format_frame(frame):
    buf = io.StringIO()
    frame.to_csv(buf, index=False, float_format="%.17g", na_rep="")
    return buf.getvalue()


def write_dataset(dataset, survival_path, longitudinal_path):
    """Write both tables as CSV in the canonical schema (lossless floats)."""
    for frame, path in ((dataset.survival, survival_path), (dataset.longitudinal, longitudinal_path)):
        text = _format_frame(frame)
        if hasattr(path, "write"):
            path.write(text)
        else:
            with open(os.fspath(path), "w", newline="") as fh:
                fh.write(text)


def log_name(var):
    return "log" + var[:1].upper() + var[1:]


def log_transform(dataset, variables):
    """Replace each named longitudinal covariate by its natural log.

    The new column is named by prefixing ``log`` (``serBilir`` becomes
    ``logSerBilir``) and takes the original column's position.
    """
    long = dataset.longitudinal.copy()
    names = list(dataset.longitudinal_vars)
    for var in variables:
        if var not in names:
            raise DataError(f"log_transform: {var!r} is not a longitudinal covariate")
        vals = long[var].to_numpy(dtype=float)
        bad = ~np.isnan(vals) & (vals <= 0)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataError(
                f"log_transform: nonpositive value {vals[row]!r} in variable {var!r} at row {row + 1}"
            )
        new = log_name(var)
        with np.errstate(invalid="ignore"):
            long[var] = np.log(vals)
        long = long.rename(columns={var: new})
        names[names.index(var)] = new
    return replace(dataset, longitudinal=long, longitudinal_vars=tuple(names))


def apply_landmark(dataset, t_landmark):
    """Keep subjects with time > t_L and their measurements with fuptime <= t_L.

    Subjects left with no longitudinal rows are dropped with a warning.
    Re-applying the landmark a dataset already carries is a no-op.
    """
    t_landmark = float(t_landmark)
    if not t_landmark > 0:
        raise DataError(f"landmark time must be positive, got {t_landmark}")
    if dataset.landmark is not None:
        if dataset.landmark == t_landmark:
            return dataset
        raise DataError(f"dataset already landmarked at {dataset.landmark}, cannot re-landmark at {t_landmark}")
    surv = dataset.survival[dataset.survival["time"] > t_landmark]
    if surv.empty:
        raise DataError(f"landmark {t_landmark} exceeds every survival time: empty risk set")
    keep = set(surv["id"])
    long = dataset.longitudinal
    long = long[long["id"].isin(keep) & (long["fuptime"] <= t_landmark)]
    with_rows = set(long["id"])
    dropped = [i for i in surv["id"] if i not in with_rows]
    if dropped:
        warnings.warn(
            f"dropping {len(dropped)} subject(s) with no measurements up to the landmark: {dropped}",
            stacklevel=2,
        )
        surv = surv[surv["id"].isin(with_rows)]
    return replace(
        dataset,
        survival=surv.reset_index(drop=True),
        longitudinal=long.reset_index(drop=True),
        landmark=t_landmark,
    )


def kaplan_meier(times, events, censored_first=False):
    """Product-limit survival estimate as a :class:`StepFunction`.

    At tied times events are processed before censorings, so censored
    subjects still count in the risk set. With ``censored_first`` the order is
    reversed, which is what the censoring-distribution estimate needs when
    events are to be ordered before censorings.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=float)
    if times.size == 0:
        raise ValueError("kaplan_meier needs at least one observation")
    if times.shape != events.shape:
        raise ValueError("times and events must have equal lengths")
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    uniq, inv = np.unique(times, return_inverse=True)
    d = np.bincount(inv, weights=events, minlength=uniq.size)
    total = np.bincount(inv, minlength=uniq.size).astype(float)
    at_risk = total[::-1].cumsum()[::-1]
    if censored_first:
        at_risk = at_risk - (total - d)
    mask = d > 0
    factors = 1.0 - d[mask] / at_risk[mask]
    return StepFunction(uniq[mask], np.cumprod(factors), 1.0)


def earliest_or_latest(dataset, var, latest):
    """Per-subject first (or last) non-missing value of ``var`` by fuptime.

    Returns a Series indexed by subject id; subjects without any non-missing
    value are absent.
    """
    long = dataset.longitudinal[["id", "fuptime", var]].dropna(subset=[var])
    long = long.sort_values(["id", "fuptime"], kind="mergesort")
    grouped = long.groupby("id", sort=False)[var]
    return grouped.last() if latest else grouped.first()
