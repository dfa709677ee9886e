"""Incompletely observed multivariate time series: data model, preprocessing and file I/O.

A dataset holds ``N`` records of ``V`` variables observed over ``T`` aligned
timesteps. Values live in an ``(N, V, T)`` float array and observation status
in a boolean array of the same shape (``True`` = observed). Cells that are not
observed always hold ``NaN`` so that any accidental numeric use propagates
loudly instead of silently reading stale data.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MISSING_TOKEN = "NA"
INDICATOR_SUFFIX = "__obs"
LONG_HEADER = ("sample_id", "timestamp", "variable", "value")


class DatasetError(ValueError):
    """Raised for malformed datasets, files or preprocessing requests."""


@dataclass(frozen=True)
class MtsRecord:
    """One multivariate time series with its observation mask."""

    values: np.ndarray  # (V, T), NaN where mask is False
    mask: np.ndarray  # (V, T) bool
    id: str = ""


@dataclass(frozen=True, eq=False)
class MtsDataset:
    values: np.ndarray  # (N, V, T)
    mask: np.ndarray  # (N, V, T) bool
    variable_names: tuple[str, ...]
    labels: np.ndarray | None = None  # (N,) int
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 3:
            raise DatasetError(f"values must be (N, V, T), got shape {values.shape}")
        if mask.shape != values.shape:
            raise DatasetError(f"mask shape {mask.shape} != values shape {values.shape}")
        n, v, _ = values.shape
        if not np.all(np.isfinite(values[mask])):
            raise DatasetError("observed cells must hold finite values")
        values[~mask] = np.nan
        values.flags.writeable = False
        mask.flags.writeable = False
        names = tuple(str(s) for s in self.variable_names)
        if len(names) != v:
            raise DatasetError(f"expected {v} variable names, got {len(names)}")
        labels = self.labels
        if labels is not None:
            labels = np.array(labels, dtype=int)
            if labels.shape != (n,):
                raise DatasetError(f"expected {n} labels, got {labels.size}")
            labels.flags.writeable = False
        ids = tuple(str(i) for i in self.ids) if len(self.ids) else tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise DatasetError(f"expected {n} ids, got {len(ids)}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "variable_names", names)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def n_records(self) -> int:
        return self.values.shape[0]

    @property
    def n_variables(self) -> int:
        return self.values.shape[1]

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[2]

    def __len__(self) -> int:
        return self.n_records

    def __getitem__(self, n: int) -> MtsRecord:
        return MtsRecord(self.values[n], self.mask[n], self.ids[n])

    def __iter__(self) -> Iterator[MtsRecord]:
        return (self[n] for n in range(self.n_records))

    @property
    def records(self) -> list[MtsRecord]:
        return list(self)

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with unobserved cells replaced by ``fill``."""
        return np.where(self.mask, np.nan_to_num(self.values, nan=fill), fill)

    def replace(self, **changes) -> "MtsDataset":
        kwargs = dict(
            values=self.values,
            mask=self.mask,
            variable_names=self.variable_names,
            labels=self.labels,
            ids=self.ids,
        )
        kwargs.update(changes)
        return MtsDataset(**kwargs)

    def subset(self, records=None, variables=None, timesteps=None) -> "MtsDataset":
        """Restrict to the given record, variable and timestep indices."""
        r = np.arange(self.n_records) if records is None else np.asarray(records, dtype=int)
        v = np.arange(self.n_variables) if variables is None else np.asarray(variables, dtype=int)
        t = np.arange(self.n_timesteps) if timesteps is None else np.asarray(timesteps, dtype=int)
        idx = np.ix_(r, v, t)
        return MtsDataset(
            values=self.values[idx],
            mask=self.mask[idx],
            variable_names=[self.variable_names[i] for i in v],
            labels=None if self.labels is None else self.labels[r],
            ids=[self.ids[i] for i in r],
        )

    def equals(self, other: "MtsDataset") -> bool:
        """Exact equality of values, masks, labels, names and ids."""
        if self.shape != other.shape or self.variable_names != other.variable_names:
            return False
        if self.ids != other.ids:
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        if self.labels is not None and not np.array_equal(self.labels, other.labels):
            return False
        return bool(
            np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values[self.mask], other.values[other.mask])
        )


def from_arrays(values, mask=None, labels=None, variable_names=None, ids=()) -> MtsDataset:
    """Build a dataset from an ``(N, V, T)`` array; NaN cells count as missing when no mask is given."""
    values = np.asarray(values, dtype=float)
    if mask is None:
        mask = np.isfinite(values)
    if variable_names is None:
        variable_names = [f"x{i}" for i in range(values.shape[1])]
    return MtsDataset(values, mask, variable_names, labels, ids)


# --------------------------------------------------------------------------
# Long-format ingestion
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LongEvent:
    sample_id: str
    timestamp: float
    variable_name: str
    value: float


@dataclass
class IngestReport:
    dropped_after_horizon: int = 0
    n_events: int = 0


def ingest_long_format(
    events: Iterable[LongEvent],
    n_bins: int,
    horizon: float,
    variables: Sequence[str] | None = None,
    report: IngestReport | None = None,
) -> MtsDataset:
    """Bin timestamped events into a fixed grid of ``n_bins`` equal bins over ``[0, horizon)``.

    Events sharing a (sample, variable, bin) are averaged; empty bins are
    missing. Events at or after ``horizon`` are dropped and counted in
    ``report``. When ``variables`` is given it is the vocabulary; otherwise the
    variables are taken in order of first appearance.
    """
    if n_bins < 1:
        raise DatasetError("n_bins must be >= 1")
    if not horizon > 0:
        raise DatasetError("horizon must be > 0")
    events = list(events)
    if not events:
        raise DatasetError("empty event collection")
    report = report if report is not None else IngestReport()
    report.n_events = len(events)

    if variables is None:
        variables = list(dict.fromkeys(e.variable_name for e in events))
    var_index = {name: i for i, name in enumerate(variables)}
    sample_index: dict[str, int] = {}
    for e in events:
        if e.variable_name not in var_index:
            raise DatasetError(f"unknown variable name {e.variable_name!r}")
        if e.timestamp < 0:
            raise DatasetError(f"negative timestamp {e.timestamp} for sample {e.sample_id!r}")
        sample_index.setdefault(e.sample_id, len(sample_index))

    n, v = len(sample_index), len(variables)
    sums = np.zeros((n, v, n_bins))
    counts = np.zeros((n, v, n_bins), dtype=int)
    width = horizon / n_bins
    for e in events:
        if e.timestamp >= horizon:
            report.dropped_after_horizon += 1
            continue
        b = min(int(math.floor(e.timestamp / width)), n_bins - 1)
        i, j = sample_index[e.sample_id], var_index[e.variable_name]
        sums[i, j, b] += e.value
        counts[i, j, b] += 1
    if report.dropped_after_horizon:
        logger.info("dropped %d events at or after horizon %g", report.dropped_after_horizon, horizon)

    mask = counts > 0
    values = np.divide(sums, counts, out=np.full_like(sums, np.nan), where=mask)
    return MtsDataset(values, mask, variables, None, list(sample_index))


def read_long_events(path) -> list[LongEvent]:
    """Parse a ``sample_id,timestamp,variable,value`` CSV file. Errors cite the 1-based line number."""
    events = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != LONG_HEADER:
            raise DatasetError(f"line 1: expected header {','.join(LONG_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DatasetError(f"line {lineno}: expected 4 fields, got {len(row)}")
            sid, ts, var, val = (c.strip() for c in row)
            try:
                event = LongEvent(sid, float(ts), var, float(val))
            except ValueError:
                raise DatasetError(f"line {lineno}: non-numeric timestamp or value") from None
            if not (math.isfinite(event.timestamp) and math.isfinite(event.value)):
                raise DatasetError(f"line {lineno}: non-finite timestamp or value")
            events.append(event)
    return events


# --------------------------------------------------------------------------
# Missingness bookkeeping
# --------------------------------------------------------------------------


def missing_rates(dataset: MtsDataset) -> tuple[np.ndarray, float]:
    """Per-variable and overall fraction of unobserved cells."""
    if dataset.n_records == 0:
        raise DatasetError("dataset is empty")
    missing = ~dataset.mask
    return missing.mean(axis=(0, 2)), float(missing.mean())


def drop_high_missing_variables(dataset: MtsDataset, threshold: float) -> tuple[MtsDataset, list[str]]:
    """Drop variables whose dataset-wide missing rate exceeds ``threshold``."""
    if not 0 < threshold <= 1:
        raise DatasetError("threshold must be in (0, 1]")
    rates, _ = missing_rates(dataset)
    keep = np.flatnonzero(rates <= threshold)
    dropped = [dataset.variable_names[i] for i in np.flatnonzero(rates > threshold)]
    if keep.size == 0:
        raise DatasetError(f"all {dataset.n_variables} variables exceed missing rate {threshold}")
    return dataset.subset(variables=keep), dropped


# --------------------------------------------------------------------------
# Standardization and imputation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray  # (V,)
    std: np.ndarray  # (V,), strictly positive

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=float))
        if np.any(self.std <= 0):
            raise DatasetError("standard deviations must be positive")


def _observed_moments(dataset: MtsDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    counts = dataset.mask.sum(axis=(0, 2))
    x = dataset.filled(0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = x.sum(axis=(0, 2)) / counts
        dev = np.where(dataset.mask, x - mean[None, :, None], 0.0)
        var = (dev**2).sum(axis=(0, 2)) / counts
    return counts, mean, np.sqrt(var)


def _require_observed(dataset: MtsDataset, counts: np.ndarray):
    empty = [dataset.variable_names[i] for i in np.flatnonzero(counts == 0)]
    if empty:
        raise DatasetError(f"variables with no observed cells: {', '.join(empty)}")


def standardize(dataset: MtsDataset) -> tuple[MtsDataset, StandardizationStats]:
    """Zero-mean, unit-std scaling per variable using observed cells pooled over records and time.

    Uses the population standard deviation. A constant variable gets std 1.0
    and a warning.
    """
    counts, mean, std = _observed_moments(dataset)
    _require_observed(dataset, counts)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if np.any(constant):
        names = [dataset.variable_names[i] for i in np.flatnonzero(constant)]
        warnings.warn(f"constant observed variables, using std=1: {', '.join(names)}", stacklevel=2)
        std = np.where(constant, 1.0, std)
    stats = StandardizationStats(mean, std)
    return apply_standardization(dataset, stats), stats


def apply_standardization(dataset: MtsDataset, stats: StandardizationStats) -> MtsDataset:
    if stats.mean.shape != (dataset.n_variables,):
        raise DatasetError(
            f"stats cover {stats.mean.shape[0]} variables, dataset has {dataset.n_variables}"
        )
    values = (dataset.values - stats.mean[None, :, None]) / stats.std[None, :, None]
    return dataset.replace(values=values)


def unstandardize(dataset: MtsDataset, stats: StandardizationStats) -> MtsDataset:
    values = dataset.values * stats.std[None, :, None] + stats.mean[None, :, None]
    return dataset.replace(values=values)


IMPUTE_STRATEGIES = ("mean", "zero", "locf")


def impute(dataset: MtsDataset, strategy: str) -> MtsDataset:
    """Fill unobserved cells; the result is fully observed.

    ``locf`` carries the last observation forward along time within each
    record; cells before a record's first observation get the variable's
    observed mean.
    """
    if strategy not in IMPUTE_STRATEGIES:
        raise DatasetError(f"unknown imputation strategy {strategy!r}")
    if strategy == "zero":
        return dataset.replace(values=dataset.filled(0.0), mask=np.ones_like(dataset.mask))

    counts, mean, _ = _observed_moments(dataset)
    _require_observed(dataset, counts)
    fill = np.broadcast_to(mean[None, :, None], dataset.shape)
    if strategy == "mean":
        return dataset.replace(values=np.where(dataset.mask, dataset.values, fill), mask=np.ones_like(dataset.mask))

    # index of the most recent observed timestep, -1 before the first one
    t = np.arange(dataset.n_timesteps)
    last = np.maximum.accumulate(np.where(dataset.mask, t, -1), axis=2)
    carried = np.take_along_axis(dataset.values, np.maximum(last, 0), axis=2)
    values = np.where(last >= 0, carried, fill)
    return dataset.replace(values=values, mask=np.ones_like(dataset.mask))


def concat_missingness_indicators(dataset: MtsDataset) -> MtsDataset:
    """Append one fully observed 0/1 indicator variable per original variable."""
    indicators = dataset.mask.astype(float)
    return dataset.replace(
        values=np.concatenate([dataset.values, indicators], axis=1),
        mask=np.concatenate([dataset.mask, np.ones_like(dataset.mask)], axis=1),
        variable_names=dataset.variable_names + tuple(n + INDICATOR_SUFFIX for n in dataset.variable_names),
    )


# --------------------------------------------------------------------------
# Dataset file format
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: MtsDataset, path) -> None:
    """Write the comma-separated text format.

    Layout: ``#mts N=<n> V=<v> T=<t>`` header, variable-name line, optional
    ``#labels`` and ``#ids`` lines, then ``N`` blocks of ``V`` rows by ``T``
    columns with unobserved cells written as ``NA``.
    """
    n, v, t = dataset.shape
    lines = [f"#mts N={n} V={v} T={t}", ",".join(dataset.variable_names)]
    if dataset.labels is not None:
        lines.append("#labels " + ",".join(str(int(y)) for y in dataset.labels))
    if dataset.ids != tuple(str(i) for i in range(n)):
        lines.append("#ids " + ",".join(dataset.ids))
    for i in range(n):
        for j in range(v):
            row = dataset.values[i, j]
            obs = dataset.mask[i, j]
            lines.append(",".join(_fmt(x) if o else MISSING_TOKEN for x, o in zip(row, obs)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> MtsDataset:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#mts"):
        raise DatasetError("line 1: missing '#mts N=<n> V=<v> T=<t>' header")
    try:
        header = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
        n, v, t = int(header["N"]), int(header["V"]), int(header["T"])
    except (KeyError, ValueError):
        raise DatasetError(f"line 1: malformed header {lines[0]!r}") from None
    if len(lines) < 2:
        raise DatasetError("line 2: missing variable names")
    names = lines[1].split(",") if v else []
    if len(names) != v:
        raise DatasetError(f"line 2: expected {v} variable names, got {len(names)}")

    pos = 2
    labels = None
    ids: list[str] = []
    while pos < len(lines) and lines[pos].startswith("#"):
        tag, _, rest = lines[pos].partition(" ")
        if tag == "#labels":
            try:
                labels = [int(s) for s in rest.split(",")] if rest else []
            except ValueError:
                raise DatasetError(f"line {pos + 1}: non-integer label") from None
        elif tag == "#ids":
            ids = rest.split(",") if rest else []
        else:
            raise DatasetError(f"line {pos + 1}: unknown directive {tag!r}")
        pos += 1

    rows = [(i + 1, s) for i, s in enumerate(lines[pos:], start=pos) if s.strip()]
    if v and len(rows) % v:
        raise DatasetError(f"line {rows[-1][0]}: {len(rows)} data rows is not a multiple of V={v}")
    if len(rows) != n * v:
        raise DatasetError(f"expected {n * v} data rows, found {len(rows)}")
    values = np.full((n, v, t), np.nan)
    mask = np.zeros((n, v, t), dtype=bool)
    for k, (lineno, s) in enumerate(rows):
        cells = s.split(",")
        if len(cells) != t:
            raise DatasetError(f"line {lineno}: expected {t} columns, got {len(cells)}")
        i, j = divmod(k, v)
        for c, cell in enumerate(cells):
            cell = cell.strip()
            if cell == MISSING_TOKEN:
                continue
            try:
                values[i, j, c] = float(cell)
            except ValueError:
                raise DatasetError(f"line {lineno}: non-numeric cell {cell!r}") from None
            mask[i, j, c] = True
    return MtsDataset(values, mask, names, labels, ids)
