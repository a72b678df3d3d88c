"""Dataset ingestion, covariate typing, dummy encoding and cutpoint grids."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd


class ValidationError(ValueError):
    """Input data or configuration violates a documented precondition."""


@dataclass(frozen=True)
class ColumnKind:
    """Type of a covariate column.

    ``kind`` is one of ``"continuous"``, ``"binary"`` or ``"categorical"``;
    categorical columns carry their ordered list of distinct labels (empty
    means the levels are taken from the data at load time).
    """

    kind: str
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "binary", "categorical"):
            raise ValidationError(f"unknown column kind {self.kind!r}")
        if len(set(self.levels)) != len(self.levels):
            raise ValidationError("categorical levels must be distinct")

    @classmethod
    def continuous(cls) -> "ColumnKind":
        return cls("continuous")

    @classmethod
    def binary(cls) -> "ColumnKind":
        return cls("binary")

    @classmethod
    def categorical(cls, levels: Sequence) -> "ColumnKind":
        return cls("categorical", tuple(str(v) for v in levels))

    def __str__(self):
        if self.kind == "categorical":
            return f"categorical({len(self.levels)})"
        return self.kind


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcome, binary treatment and typed covariates for ``n`` units.

    Categorical columns of ``X`` hold string labels; every other column is
    float. ``y_mean`` and ``y_sd`` (sample sd) are the standardization
    constants of the raw outcome.
    """

    y: np.ndarray
    z: np.ndarray
    X: pd.DataFrame
    kinds: dict[str, ColumnKind]
    pi_hat: np.ndarray | None = None
    y_mean: float = field(init=False)
    y_sd: float = field(init=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        z = np.asarray(self.z)
        n = y.shape[0]
        if n < 2:
            raise ValidationError("need at least 2 rows")
        if z.shape != (n,) or len(self.X) != n:
            raise ValidationError("y, z and X must all have length n")
        if not np.all(np.isfinite(y)):
            raise ValidationError("outcome contains missing or non-finite values")
        if not np.isin(z, (0, 1)).all():
            raise ValidationError("treatment must be coded 0/1")
        if list(self.kinds) != list(self.X.columns):
            raise ValidationError("kinds must list every covariate column in order")
        for name, kind in self.kinds.items():
            col = self.X[name]
            if col.isna().any():
                raise ValidationError(f"column {name!r} has missing values")
            if kind.kind == "binary" and not np.isin(col.to_numpy(dtype=float), (0, 1)).all():
                raise ValidationError(f"binary column {name!r} must be 0/1")
            if kind.kind == "categorical":
                unknown = set(col.astype(str)) - set(kind.levels)
                if unknown:
                    raise ValidationError(f"column {name!r} has undeclared levels {sorted(unknown)}")
        pi = None
        if self.pi_hat is not None:
            pi = np.asarray(self.pi_hat, dtype=float)
            if pi.shape != (n,):
                raise ValidationError("pi_hat must have length n")
            if not np.all((pi > 0) & (pi < 1)):
                raise ValidationError("pi_hat entries must lie in (0, 1)")
            pi.setflags(write=False)
        sd = float(np.std(y, ddof=1))
        if not sd > 0:
            raise ValidationError("outcome is constant (sd = 0)")
        y.setflags(write=False)
        z = z.astype(np.int64)
        z.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "pi_hat", pi)
        object.__setattr__(self, "y_mean", float(np.mean(y)))
        object.__setattr__(self, "y_sd", sd)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def with_pi_hat(self, pi_hat: np.ndarray) -> "Dataset":
        return Dataset(self.y, self.z, self.X, dict(self.kinds), pi_hat)

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        pi = None if self.pi_hat is None else self.pi_hat[rows]
        return Dataset(self.y[rows], self.z[rows], self.X.iloc[rows].reset_index(drop=True),
                       dict(self.kinds), pi)

    def require_both_arms(self):
        n1 = int(self.z.sum())
        if n1 == 0 or n1 == self.n:
            raise ValidationError("both treatment arms must be nonempty")

    def equals(self, other: "Dataset") -> bool:
        if self.kinds != other.kinds or not self.X.equals(other.X):
            return False
        if (self.pi_hat is None) != (other.pi_hat is None):
            return False
        same_pi = self.pi_hat is None or np.array_equal(self.pi_hat, other.pi_hat)
        return np.array_equal(self.y, other.y) and np.array_equal(self.z, other.z) and same_pi


def parse_kind(text: str) -> ColumnKind:
    """Parse ``continuous``, ``binary`` or ``categorical[:a|b|c]``."""
    head, _, rest = text.strip().partition(":")
    head = head.lower()
    if head in ("continuous", "cont"):
        return ColumnKind.continuous()
    if head in ("binary", "bin"):
        return ColumnKind.binary()
    if head in ("categorical", "cat"):
        levels = tuple(v for v in rest.split("|") if v) if rest else ()
        return ColumnKind("categorical", levels)
    raise ValidationError(f"unknown column kind {text!r}")


def _read_cells(path: Path) -> tuple[list[str], list[list]]:
    """Read a CSV as header + rows.

    Quoted cells are kept as text; unquoted cells become floats when they
    parse, so a quoted ``"2"`` is a categorical label while ``2`` is a number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader([fh.readline()]), None)
        body = fh.read()
    if not header:
        raise ValidationError(f"{path}: missing header row")
    header = [h.strip() for h in header]
    lines = body.splitlines()
    try:
        rows = list(csv.reader(lines, quoting=csv.QUOTE_NONNUMERIC))
    except ValueError:
        rows = []
        for raw in csv.reader(lines):
            parsed = []
            for cell in raw:
                try:
                    parsed.append(float(cell) if cell.strip() != "" else "")
                except ValueError:
                    parsed.append(cell)
            rows.append(parsed)
    rows = [r for r in rows if r != []]
    for k, r in enumerate(rows):
        if len(r) != len(header):
            raise ValidationError(f"{path}: row {k + 2} has {len(r)} cells, expected {len(header)}")
        if any(c == "" for c in r):
            raise ValidationError(f"{path}: row {k + 2} has a missing cell")
    return header, rows


def _infer_kind(values: list) -> ColumnKind:
    if all(isinstance(v, float) for v in values):
        distinct = set(values)
        if distinct <= {0.0, 1.0} and len(distinct) == 2:
            return ColumnKind.binary()
        return ColumnKind.continuous()
    levels = list(dict.fromkeys(_label(v) for v in values))
    return ColumnKind.categorical(levels)


def _label(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


def load_csv(path, outcome: str, treatment: str, propensity: str | None = None,
             schema: Mapping[str, ColumnKind] | None = None) -> Dataset:
    """Load a dataset from a CSV file with a header row.

    Every column other than outcome, treatment and propensity is a covariate.
    Kinds not given in ``schema`` are inferred: numeric with exactly the
    values {0, 1} is binary, other numeric columns are continuous and text
    columns are categorical with levels in order of first appearance.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    header, rows = _read_cells(path)
    schema = dict(schema or {})
    for name in [outcome, treatment] + ([propensity] if propensity else []) + list(schema):
        if name not in header:
            raise ValidationError(f"column {name!r} not found in {path}")
    cols = {h: [r[j] for r in rows] for j, h in enumerate(header)}

    def numeric(name):
        return _numeric(cols, name)

    y = numeric(outcome)
    z = numeric(treatment)
    if not np.isin(z, (0.0, 1.0)).all():
        bad = sorted(set(z[~np.isin(z, (0.0, 1.0))].tolist()))
        raise ValidationError(f"treatment column {treatment!r} has non-binary values {bad[:5]}")
    pi = numeric(propensity) if propensity else None

    covs = [h for h in header if h not in (outcome, treatment, propensity)]
    X, kinds = _covariates(cols, covs, schema)
    return Dataset(y, z.astype(np.int64), X, kinds, pi)


def _numeric(cols: dict, name: str) -> np.ndarray:
    vals = cols[name]
    if not all(isinstance(v, float) for v in vals):
        raise ValidationError(f"column {name!r} must be numeric")
    return np.array(vals, dtype=float)


def _covariates(cols: dict, names: list[str], schema: Mapping[str, ColumnKind]):
    data, kinds = {}, {}
    for name in names:
        kind = schema.get(name) or _infer_kind(cols[name])
        if kind.kind == "categorical":
            labels = [_label(v) for v in cols[name]]
            if not kind.levels:
                kind = ColumnKind.categorical(list(dict.fromkeys(labels)))
            data[name] = np.array(labels, dtype=object)
        else:
            data[name] = _numeric(cols, name)
        kinds[name] = kind
    return pd.DataFrame(data, columns=names), kinds


def load_treatment_csv(path, treatment: str, exclude: Sequence[str] = (),
                       schema: Mapping[str, ColumnKind] | None = None):
    """Covariates and treatment for propensity modelling; no outcome needed.

    Returns ``(X, kinds, z)``. Columns in ``exclude`` that are present are dropped.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    header, rows = _read_cells(path)
    schema = dict(schema or {})
    for name in [treatment] + list(schema):
        if name not in header:
            raise ValidationError(f"column {name!r} not found in {path}")
    cols = {h: [r[j] for r in rows] for j, h in enumerate(header)}
    z = _numeric(cols, treatment)
    if not np.isin(z, (0.0, 1.0)).all():
        raise ValidationError(f"treatment column {treatment!r} must be 0/1")
    covs = [h for h in header if h != treatment and h not in exclude]
    if not covs:
        raise ValidationError("no covariate columns")
    X, kinds = _covariates(cols, covs, schema)
    return X, kinds, z.astype(np.int64)


def write_csv(ds: Dataset, path, outcome: str = "y", treatment: str = "z",
              propensity: str = "pi_hat"):
    """Write ``ds`` so that :func:`load_csv` reads back an equal Dataset.

    Categorical labels are quoted, numbers are written unquoted with full
    precision.
    """
    header = [outcome, treatment] + list(ds.X.columns)
    if ds.pi_hat is not None:
        header.append(propensity)
    cols = [ds.y.tolist(), ds.z.astype(float).tolist()]
    for name, kind in ds.kinds.items():
        if kind.kind == "categorical":
            cols.append([str(v) for v in ds.X[name]])
        else:
            cols.append(ds.X[name].to_numpy(dtype=float).tolist())
    if ds.pi_hat is not None:
        cols.append(ds.pi_hat.tolist())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        writer = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC, lineterminator="\n")
        writer.writerows(zip(*cols))


@dataclass(frozen=True)
class AffineMap:
    """``x -> shift + scale * x``; maps standardized quantities to raw units."""

    shift: float
    scale: float

    def __call__(self, values):
        return self.shift + self.scale * np.asarray(values, dtype=float)

    def scale_only(self, values):
        """Map differences (e.g. treatment effects), which carry no shift."""
        return self.scale * np.asarray(values, dtype=float)


def standardize(ds: Dataset) -> tuple[np.ndarray, AffineMap]:
    y_std = (ds.y - ds.y_mean) / ds.y_sd
    return y_std, AffineMap(ds.y_mean, ds.y_sd)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Numeric design: continuous columns passed through, one 0/1 indicator
    per categorical level.

    ``origin[j]`` is ``(source column, level)`` with ``level=None`` for
    non-categorical sources; ``indicator[j]`` marks 0/1 columns.
    """

    values: np.ndarray
    origin: tuple[tuple[str, str | None], ...]
    indicator: tuple[bool, ...]

    @property
    def names(self) -> list[str]:
        return [src if lvl is None else f"{src}={lvl}" for src, lvl in self.origin]

    @property
    def shape(self):
        return self.values.shape

    def append(self, name: str, column: np.ndarray, indicator: bool = False) -> "DesignMatrix":
        col = np.asarray(column, dtype=float).reshape(-1, 1)
        return DesignMatrix(np.hstack([self.values, col]), self.origin + ((name, None),),
                            self.indicator + (indicator,))

    def rows(self, idx) -> "DesignMatrix":
        return DesignMatrix(self.values[idx], self.origin, self.indicator)

    def with_column(self, j: int, column) -> "DesignMatrix":
        vals = self.values.copy()
        vals[:, j] = column
        return DesignMatrix(vals, self.origin, self.indicator)


def design_matrix(X: pd.DataFrame, kinds: Mapping[str, ColumnKind]) -> DesignMatrix:
    cols, origin, indicator = [], [], []
    for name, kind in kinds.items():
        if kind.kind == "categorical":
            labels = X[name].astype(str).to_numpy()
            for lvl in kind.levels:
                cols.append((labels == lvl).astype(float))
                origin.append((name, lvl))
                indicator.append(True)
        else:
            cols.append(X[name].to_numpy(dtype=float))
            origin.append((name, None))
            indicator.append(kind.kind == "binary")
    n = len(X)
    values = np.column_stack(cols) if cols else np.empty((n, 0))
    return DesignMatrix(values, tuple(origin), tuple(indicator))


@dataclass(frozen=True, eq=False)
class CutpointGrid:
    """Ascending candidate thresholds per design column.

    A rule ``(j, c)`` sends rows with ``x[j] <= cuts[j][c]`` to the left child.
    """

    cuts: tuple[np.ndarray, ...]

    @property
    def ncuts(self) -> np.ndarray:
        return np.array([len(c) for c in self.cuts], dtype=np.int32)

    def bin(self, values: np.ndarray) -> np.ndarray:
        """Integer bins ``b[i, j] = #{c : cuts[j][c] < x[i, j]}``, so that
        ``x <= cuts[j][c]`` iff ``b <= c``. Returned column-major as (p, n)."""
        values = np.atleast_2d(np.asarray(values, dtype=float))
        out = np.empty((values.shape[1], values.shape[0]), dtype=np.int32)
        for j, cuts in enumerate(self.cuts):
            out[j] = np.searchsorted(cuts, values[:, j], side="left")
        return out

    def append(self, cuts: np.ndarray) -> "CutpointGrid":
        return CutpointGrid(self.cuts + (np.asarray(cuts, dtype=float),))


def column_cutpoints(x: np.ndarray, max_cuts: int, indicator: bool = False) -> np.ndarray:
    u = np.unique(np.asarray(x, dtype=float))
    if u.size < 2:
        return np.empty(0)
    if indicator:
        return np.array([0.5])
    if u.size - 1 <= max_cuts:
        return (u[:-1] + u[1:]) / 2
    # quantile positions among the distinct-value gaps, then midpoints
    xs = np.sort(np.asarray(x, dtype=float))
    q = np.arange(1, max_cuts + 1) / (max_cuts + 1)
    vals = xs[np.floor(q * (xs.size - 1)).astype(int)]
    k = np.searchsorted(u, vals, side="left")
    k = np.unique(np.minimum(k, u.size - 2))
    return (u[k] + u[k + 1]) / 2


def build_cutpoints(dm: DesignMatrix, max_cuts: int = 100) -> CutpointGrid:
    if max_cuts < 1:
        raise ValidationError("max_cuts must be >= 1")
    return CutpointGrid(tuple(column_cutpoints(dm.values[:, j], max_cuts, dm.indicator[j])
                              for j in range(dm.shape[1])))


def read_vector(path, column: str | None = None) -> np.ndarray:
    """Read one numeric column (default: the first) from a CSV file."""
    frame = pd.read_csv(path, float_precision="round_trip")
    name = column or frame.columns[0]
    if name not in frame.columns:
        raise ValidationError(f"column {name!r} not found in {path}")
    return frame[name].to_numpy(dtype=float)
