"""Empirical marginal transformation to and from the unit Laplace scale.

Each site is mapped through its own empirical distribution function with
plotting position ``rank / (n + 1)`` (ties get their average rank) and then
through the standard Laplace quantile function.  The back-transform
interpolates linearly between the order statistics on the probability
scale and clamps outside the observed range.
"""
from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from spatialcex._validation import check_array, check_probability
from spatialcex.distributions import laplace_cdf, laplace_ppf

__all__ = [
    "MarginTag",
    "SpatialDataset",
    "MarginalTransform",
    "LaplaceMarginTransformer",
    "to_laplace",
    "from_laplace",
    "laplace_threshold",
    "read_dataset",
    "write_locations",
    "write_observations",
    "CSVSchemaError",
]


class MarginTag(str, enum.Enum):
    RAW = "raw"
    LAPLACE = "laplace"
    EXPONENTIAL = "exponential"


class CSVSchemaError(ValueError):
    """Malformed input CSV; the message carries the file, line and column."""


@dataclass
class SpatialDataset:
    """Site coordinates plus a replicates-by-sites observation matrix.

    Attributes
    ----------
    locations : ndarray of shape (d, 2)
    observations : ndarray of shape (n, d)
    margin_tag : MarginTag
    site_ids : list of str, optional
        Defaults to ``"0" .. "d-1"``.
    replicate_times : list of str, optional
    """

    locations: np.ndarray
    observations: np.ndarray
    margin_tag: MarginTag = MarginTag.RAW
    site_ids: list[str] | None = None
    replicate_times: list[str] | None = None

    def __post_init__(self):
        self.locations = check_array(self.locations, dtype=float, input_name="locations")
        self.observations = check_array(
            self.observations, dtype=float, ensure_min_features=1, input_name="observations"
        )
        self.margin_tag = MarginTag(self.margin_tag)
        d = self.locations.shape[0]
        if self.locations.shape[1] != 2:
            raise ValueError("locations must be a d x 2 matrix")
        if d < 2:
            raise ValueError("at least two sites are required")
        if self.observations.shape[1] != d:
            raise ValueError(f"observations have {self.observations.shape[1]} columns for {d} sites")
        if len(np.unique(self.locations, axis=0)) != d:
            raise ValueError("duplicated site locations")
        if self.site_ids is None:
            self.site_ids = [str(i) for i in range(d)]
        elif len(self.site_ids) != d or len(set(self.site_ids)) != d:
            raise ValueError("site_ids must be unique with one entry per site")
        if self.replicate_times is not None and len(self.replicate_times) != self.n_replicates:
            raise ValueError("replicate_times must have one entry per replicate")

    @property
    def n_sites(self) -> int:
        return self.locations.shape[0]

    @property
    def n_replicates(self) -> int:
        return self.observations.shape[0]

    def subset(self, rows) -> "SpatialDataset":
        """Dataset restricted to the given replicate rows (index array or mask)."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        times = None if self.replicate_times is None else [self.replicate_times[i] for i in rows]
        return replace(self, observations=self.observations[rows], replicate_times=times)

    def select_times(self, times) -> "SpatialDataset":
        """Dataset restricted to replicates whose timestamp is in ``times``."""
        if self.replicate_times is None:
            raise ValueError("dataset has no replicate times")
        wanted = set(map(str, times))
        return self.subset(np.array([t in wanted for t in self.replicate_times]))


@dataclass
class MarginalTransform:
    """Per-site sorted samples defining the empirical marginal maps.

    ``sorted_values[:, j]`` are the order statistics at site ``j``; order
    statistic ``k`` (1-based) sits at probability ``k / (n + 1)``.
    """

    sorted_values: np.ndarray
    site_ids: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.sorted_values.shape[0]

    @property
    def n_sites(self) -> int:
        return self.sorted_values.shape[1]

    def to_dict(self) -> dict:
        return {"site_ids": list(self.site_ids), "sorted_values": self.sorted_values.T.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MarginalTransform":
        return cls(np.asarray(d["sorted_values"], dtype=float).T, list(d["site_ids"]))


def _average_rank(sorted_col, x):
    left = np.searchsorted(sorted_col, x, side="left")
    right = np.searchsorted(sorted_col, x, side="right")
    return 0.5 * (left + right + 1)


def _forward(sorted_values, X):
    n = sorted_values.shape[0]
    out = np.empty_like(X, dtype=float)
    for j in range(X.shape[1]):
        r = _average_rank(sorted_values[:, j], X[:, j])
        out[:, j] = laplace_ppf(np.clip(r, 0.5, n + 0.5) / (n + 1))
    return out


def to_laplace(data: SpatialDataset) -> tuple[SpatialDataset, MarginalTransform]:
    """Map each column to unit Laplace margins via its empirical distribution.

    Raises ``ValueError`` for a constant column, which carries no rank
    information.
    """
    if data.margin_tag != MarginTag.RAW:
        raise ValueError(f"expected raw margins, got {data.margin_tag.value}")
    X = data.observations
    if not np.all(np.isfinite(X)):
        raise ValueError("observations contain non-finite values")
    const = np.flatnonzero(np.ptp(X, axis=0) == 0)
    if const.size:
        raise ValueError(f"constant column(s) at site(s) {[data.site_ids[j] for j in const]}")
    t = MarginalTransform(np.sort(X, axis=0), list(data.site_ids))
    out = replace(data, observations=_forward(t.sorted_values, X), margin_tag=MarginTag.LAPLACE)
    return out, t


def from_laplace(values, t: MarginalTransform, sites=None, *, return_flags=False):
    """Back-transform Laplace-scale values to the original scale.

    Parameters
    ----------
    values : array of shape (n, m) or (m,)
        Laplace-scale values, one column per entry of ``sites``.
    t : MarginalTransform
    sites : sequence of int, optional
        Site index for each column; defaults to all sites in order.
    return_flags : bool
        Also return a boolean array marking values clamped to the sample
        extremes.

    Values beyond the range of the order statistics are clamped to the
    sample minimum or maximum and a ``RuntimeWarning`` is emitted.
    """
    values = np.asarray(values, dtype=float)
    one_d = values.ndim == 1
    V = np.atleast_2d(values)
    sites = np.arange(t.n_sites) if sites is None else np.atleast_1d(np.asarray(sites, dtype=int))
    if np.any(sites < 0) or np.any(sites >= t.n_sites):
        raise IndexError(f"site index out of range for {t.n_sites} sites")
    if V.shape[1] != sites.size:
        raise ValueError(f"got {V.shape[1]} value columns for {sites.size} sites")
    n = t.n
    pos = laplace_cdf(V) * (n + 1)
    # snap to the order-statistic grid so observed points round-trip exactly
    near = np.abs(pos - np.round(pos)) < 1e-7
    pos = np.where(near, np.round(pos), pos)
    flags = (pos < 1) | (pos > n)
    pos = np.clip(pos, 1, n)
    grid = np.arange(1, n + 1, dtype=float)
    out = np.empty_like(V)
    for c, j in enumerate(sites):
        out[:, c] = np.interp(pos[:, c], grid, t.sorted_values[:, j])
    if np.any(flags):
        warnings.warn(
            f"{int(flags.sum())} value(s) beyond the observed range were clamped to the sample extremes",
            RuntimeWarning,
            stacklevel=2,
        )
    if one_d:
        out, flags = out[0], flags[0]
    return (out, flags) if return_flags else out


def laplace_threshold(q: float) -> float:
    """Standard Laplace ``q`` quantile for ``q`` in (1/2, 1): ``-log(2(1-q))``."""
    q = check_probability(q, name="threshold quantile", low=0.5)
    return float(-np.log(2.0 * (1.0 - q)))


class LaplaceMarginTransformer(TransformerMixin, BaseEstimator):
    """Scikit-learn transformer for the empirical Laplace margin map.

    ``fit`` stores the per-column order statistics; ``transform`` applies the
    average-rank empirical cdf followed by the Laplace quantile, and
    ``inverse_transform`` interpolates back between order statistics.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=float, input_name="X")
        if np.any(np.ptp(X, axis=0) == 0):
            raise ValueError("constant column")
        self.transform_ = MarginalTransform(np.sort(X, axis=0), [str(i) for i in range(X.shape[1])])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        X = check_array(X, dtype=float, input_name="X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        return _forward(self.transform_.sorted_values, X)

    def inverse_transform(self, X):
        check_is_fitted(self, "transform_")
        return from_laplace(X, self.transform_)


# CSV ingestion and export.


def _read_rows(path):
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVSchemaError(f"{path}: empty file")
    return path, rows


def _parse_float(text, path, line, col):
    if text.strip() == "":
        raise CSVSchemaError(f"{path}:{line}:{col}: missing value")
    try:
        value = float(text)
    except ValueError:
        raise CSVSchemaError(f"{path}:{line}:{col}: not a number: {text!r}") from None
    if not np.isfinite(value):
        raise CSVSchemaError(f"{path}:{line}:{col}: non-finite value {text!r}")
    return value


def read_dataset(locations_csv, observations_csv) -> SpatialDataset:
    """Read a raw-scale dataset from the two-file CSV layout.

    The locations file has header ``site_id,x,y``.  The observations file has
    a mandatory header naming site ids (in any order, each exactly once) and
    one row per replicate; an optional leading ``time`` column carries
    replicate timestamps.  Empty cells are rejected.
    """
    path, rows = _read_rows(locations_csv)
    header = [h.strip() for h in rows[0]]
    if header != ["site_id", "x", "y"]:
        raise CSVSchemaError(f"{path}:1: expected header site_id,x,y, got {','.join(header)}")
    ids, coords = [], []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise CSVSchemaError(f"{path}:{line}: expected 3 columns, got {len(row)}")
        ids.append(row[0].strip())
        coords.append([_parse_float(row[1], path, line, 2), _parse_float(row[2], path, line, 3)])
    if len(set(ids)) != len(ids):
        raise CSVSchemaError(f"{path}: duplicated site_id")

    opath, orows = _read_rows(observations_csv)
    oheader = [h.strip() for h in orows[0]]
    has_time = bool(oheader) and oheader[0].lower() in ("time", "timestamp")
    cols = oheader[1:] if has_time else oheader
    if sorted(cols) != sorted(ids):
        missing = sorted(set(ids) - set(cols))
        extra = sorted(set(cols) - set(ids))
        raise CSVSchemaError(f"{opath}:1: header does not match site ids (missing {missing}, unknown {extra})")
    order = [cols.index(i) for i in ids]
    offset = 1 if has_time else 0
    obs, times = [], []
    for line, row in enumerate(orows[1:], start=2):
        if not row:
            continue
        if len(row) != len(oheader):
            raise CSVSchemaError(f"{opath}:{line}: expected {len(oheader)} columns, got {len(row)}")
        if has_time:
            times.append(row[0].strip())
        vals = [_parse_float(row[offset + k], opath, line, offset + k + 1) for k in range(len(cols))]
        obs.append([vals[k] for k in order])
    if not obs:
        raise CSVSchemaError(f"{opath}: no observation rows")
    return SpatialDataset(
        np.asarray(coords), np.asarray(obs), MarginTag.RAW, ids, times if has_time else None
    )


def write_locations(path, locations, site_ids) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "x", "y"])
        for sid, (x, y) in zip(site_ids, np.asarray(locations, dtype=float)):
            w.writerow([sid, repr(float(x)), repr(float(y))])


def write_observations(path, observations, site_ids, replicate_times=None) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = list(site_ids)
        if replicate_times is not None:
            head = ["time"] + head
        w.writerow(head)
        for i, row in enumerate(np.asarray(observations, dtype=float)):
            vals = [repr(float(v)) for v in row]
            if replicate_times is not None:
                vals = [replicate_times[i]] + vals
            w.writerow(vals)
