"""Datasets, fold assignment, standardization, and CSV ingestion.

Conventions used throughout the package:

- matrices are row-major numpy arrays with one observation per row;
- variance is the population (1/n) variance;
- no intercept column is ever added implicitly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .rng import philox

VALID_ROLES = ("x", "z", "y", "ignore")


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, order="C")
    out.setflags(write=False)
    return out


def _check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise DataError(f"block '{name}' contains NaN or Inf")


@dataclass(frozen=True)
class Dataset:
    """A numeric table with covariates ``x``, optional auxiliaries ``z``,
    and an optional response ``y``.

    All present blocks share the same row count. ``x`` may be absent only
    for the (z, y) pair blocks of a fusion dataset. Instances are
    immutable and safe to share across threads.
    """

    x: np.ndarray | None = None
    z: np.ndarray | None = None
    y: np.ndarray | None = None
    column_names: dict[str, list[str]] | None = None

    def __post_init__(self):
        n = None
        if self.x is not None:
            x = _as_readonly(np.atleast_2d(self.x))
            _check_finite(x, "x")
            object.__setattr__(self, "x", x)
            n = x.shape[0]
        if self.z is not None:
            z = _as_readonly(np.atleast_2d(self.z))
            _check_finite(z, "z")
            if n is not None and z.shape[0] != n:
                raise DataError(f"z has {z.shape[0]} rows, expected {n}")
            n = z.shape[0] if n is None else n
            object.__setattr__(self, "z", z)
        if self.y is not None:
            y = _as_readonly(np.asarray(self.y, dtype=np.float64).ravel())
            _check_finite(y, "y")
            if n is not None and y.shape[0] != n:
                raise DataError(f"y has {y.shape[0]} rows, expected {n}")
            n = y.shape[0] if n is None else n
            object.__setattr__(self, "y", y)
        if n is None or n < 1:
            raise DataError("dataset must contain at least one non-empty block")

    @property
    def n(self) -> int:
        for block in (self.x, self.z, self.y):
            if block is not None:
                return block.shape[0]
        raise DataError("empty dataset")

    @property
    def p_x(self) -> int:
        return 0 if self.x is None else self.x.shape[1]

    @property
    def p_z(self) -> int:
        return 0 if self.z is None else self.z.shape[1]

    def require(self, *blocks: str) -> None:
        """Raise DataError unless every named block is present."""
        for b in blocks:
            if getattr(self, b) is None:
                raise DataError(f"operation requires block '{b}'")

    def take(self, rows: np.ndarray) -> "Dataset":
        """Row-subset copy (keeps block availability)."""
        return Dataset(
            x=None if self.x is None else self.x[rows],
            z=None if self.z is None else self.z[rows],
            y=None if self.y is None else self.y[rows],
            column_names=self.column_names,
        )


@dataclass(frozen=True)
class FusionDataset:
    """Three observation blocks for data-fusion estimation.

    ``triples`` holds full (x, z, y) rows, ``xz_pairs`` holds (x, z) rows,
    and ``zy_pairs`` holds (z, y) rows. Any block may be absent (None).
    """

    triples: Dataset | None = None
    xz_pairs: Dataset | None = None
    zy_pairs: Dataset | None = None

    def __post_init__(self):
        if self.triples is None and self.xz_pairs is None and self.zy_pairs is None:
            raise DataError("fusion dataset has no observation blocks")
        if self.triples is not None:
            self.triples.require("x", "z", "y")
        if self.xz_pairs is not None:
            self.xz_pairs.require("x", "z")
        if self.zy_pairs is not None:
            self.zy_pairs.require("z", "y")
        p_xs = {d.p_x for d in (self.triples, self.xz_pairs) if d is not None}
        if len(p_xs) > 1:
            raise DataError(f"p_x disagrees across blocks: {sorted(p_xs)}")
        p_zs = {d.p_z for d in (self.triples, self.xz_pairs, self.zy_pairs) if d is not None}
        if len(p_zs) > 1:
            raise DataError(f"p_z disagrees across blocks: {sorted(p_zs)}")

    @property
    def n(self) -> int:
        return 0 if self.triples is None else self.triples.n

    @property
    def n_xz(self) -> int:
        return 0 if self.xz_pairs is None else self.xz_pairs.n

    @property
    def n_yz(self) -> int:
        return 0 if self.zy_pairs is None else self.zy_pairs.n

    @property
    def p_x(self) -> int:
        for d in (self.triples, self.xz_pairs):
            if d is not None:
                return d.p_x
        raise DataError("no X-bearing block present")

    @property
    def p_z(self) -> int:
        for d in (self.triples, self.xz_pairs, self.zy_pairs):
            if d is not None:
                return d.p_z
        raise DataError("no blocks present")


@dataclass(frozen=True)
class FoldAssignment:
    """A partition of rows 0..n-1 into ``k`` folds with ids 1..k."""

    fold_of_row: np.ndarray
    k: int
    seed: int

    def __post_init__(self):
        f = np.asarray(self.fold_of_row, dtype=np.int64)
        f.setflags(write=False)
        object.__setattr__(self, "fold_of_row", f)
        sizes = np.bincount(f, minlength=self.k + 1)[1:]
        if np.any(sizes == 0):
            raise DataError("every fold must be non-empty")
        if sizes.max() - sizes.min() > 1:
            raise DataError("fold sizes must differ by at most one")

    @property
    def n(self) -> int:
        return self.fold_of_row.shape[0]

    def rows_in_fold(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_row == fold)

    def rows_outside_fold(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_row != fold)


def split_folds(n: int, k: int = 2, seed: int = 0) -> FoldAssignment:
    """Partition ``n`` rows into ``k`` folds of near-equal size.

    A row-index permutation is drawn from Philox(seed) and rows are dealt
    round-robin, so the assignment is reproducible across platforms.
    """
    if k < 2:
        raise DataError(f"need at least 2 folds, got k={k}")
    if k > n:
        raise DataError(f"cannot split {n} rows into {k} folds")
    perm = philox(seed).permutation(n)
    fold_of_row = np.empty(n, dtype=np.int64)
    fold_of_row[perm] = np.arange(n) % k + 1
    return FoldAssignment(fold_of_row=fold_of_row, k=k, seed=seed)


@dataclass(frozen=True)
class StandardizationSpec:
    """Per-column centering/scaling transform for one block.

    ``scales`` holds the population standard deviation of each column;
    zero-variance columns get scale 1 so the transform stays invertible.
    """

    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.means, dtype=np.float64).ravel()
        s = np.asarray(self.scales, dtype=np.float64).ravel()
        if m.shape != s.shape:
            raise DataError("means and scales must have the same length")
        if np.any(s <= 0):
            raise DataError("scales must be strictly positive")
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "scales", s)

    @classmethod
    def fit(cls, block: np.ndarray) -> "StandardizationSpec":
        block = np.atleast_2d(np.asarray(block, dtype=np.float64))
        means = block.mean(axis=0)
        scales = block.std(axis=0)  # population (1/n) convention
        scales = np.where(scales > 0, scales, 1.0)
        return cls(means=means, scales=scales)

    def apply(self, block: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(block) - self.means) / self.scales

    def invert(self, block: np.ndarray) -> np.ndarray:
        return np.atleast_2d(block) * self.scales + self.means


def standardize(d: Dataset) -> tuple[Dataset, dict[str, StandardizationSpec]]:
    """Center and scale every block of ``d`` to mean 0, sd 1 per column.

    Constant columns are centered only (scale clamped to 1). Returns the
    transformed dataset and one spec per present block, keyed 'x'/'z'/'y'.
    """
    if d.n < 2:
        raise DataError("standardization needs at least 2 rows")
    specs: dict[str, StandardizationSpec] = {}
    new_x = None
    if d.x is not None:
        specs["x"] = StandardizationSpec.fit(d.x)
        new_x = specs["x"].apply(d.x)
    new_z = None
    if d.z is not None:
        specs["z"] = StandardizationSpec.fit(d.z)
        new_z = specs["z"].apply(d.z)
    new_y = None
    if d.y is not None:
        specs["y"] = StandardizationSpec.fit(d.y[:, None])
        new_y = specs["y"].apply(d.y[:, None]).ravel()
    out = Dataset(x=new_x, z=new_z, y=new_y, column_names=d.column_names)
    return out, specs


def inverse_standardize(d: Dataset, specs: dict[str, StandardizationSpec]) -> Dataset:
    """Undo :func:`standardize` (round-trips to relative 1e-12)."""
    new_x = None if d.x is None else specs["x"].invert(d.x)
    new_z = None if d.z is None else specs["z"].invert(d.z)
    new_y = None if d.y is None else specs["y"].invert(d.y[:, None]).ravel()
    return Dataset(x=new_x, z=new_z, y=new_y, column_names=d.column_names)


def load_csv(path: str, schema: dict[str, str]) -> Dataset:
    """Load an RFC-4180 CSV with a header row into a Dataset.

    ``schema`` maps column names to roles 'x', 'z', 'y', or 'ignore'.
    Columns absent from the schema are ignored. Every non-ignored cell
    must parse as a finite number; errors name the offending row and
    column.
    """
    for col, role in schema.items():
        if role not in VALID_ROLES:
            raise DataError(f"schema column '{col}' has unknown role '{role}'")
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot open '{path}': {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"'{path}' is empty; a header row is required") from None
        missing = [c for c in schema if c not in header]
        if missing:
            raise DataError(f"schema names absent columns: {missing}")
        roles = {name: schema.get(name, "ignore") for name in header}
        x_cols = [name for name in header if roles[name] == "x"]
        z_cols = [name for name in header if roles[name] == "z"]
        y_cols = [name for name in header if roles[name] == "y"]
        if not x_cols and not z_cols and not y_cols:
            raise DataError("schema routes no column to any role")
        if len(y_cols) > 1:
            raise DataError(f"schema routes {len(y_cols)} columns to role 'y'")
        col_idx = {name: i for i, name in enumerate(header)}

        def parse(row: list[str], name: str, row_no: int) -> float:
            cell = row[col_idx[name]]
            try:
                val = float(cell)
            except ValueError:
                raise DataError(
                    f"non-numeric value '{cell}' at row {row_no}, column '{name}'"
                ) from None
            if not math.isfinite(val):
                raise DataError(
                    f"non-finite value '{cell}' at row {row_no}, column '{name}'"
                )
            return val

        xs, zs, ys = [], [], []
        n_rows = 0
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"row {row_no} has {len(row)} fields, header has {len(header)}"
                )
            n_rows += 1
            if x_cols:
                xs.append([parse(row, c, row_no) for c in x_cols])
            if z_cols:
                zs.append([parse(row, c, row_no) for c in z_cols])
            if y_cols:
                ys.append(parse(row, y_cols[0], row_no))
    if n_rows == 0:
        raise DataError(f"'{path}' contains a header but no data rows")
    names = {}
    for key, cols in (("x", x_cols), ("z", z_cols), ("y", y_cols)):
        if cols:
            names[key] = cols
    return Dataset(
        x=np.asarray(xs, dtype=np.float64) if x_cols else None,
        z=np.asarray(zs, dtype=np.float64) if z_cols else None,
        y=np.asarray(ys, dtype=np.float64) if y_cols else None,
        column_names=names,
    )


def load_fusion_csv(
    triples_path: str | None,
    xz_path: str | None,
    zy_path: str | None,
    schema: dict[str, str],
) -> FusionDataset:
    """Load up to three CSV blocks sharing one schema into a FusionDataset.

    Pair files need not contain the columns of the role they lack; schema
    entries for the dropped role are simply not looked up in those files.
    """

    def block(path, drop=None):
        if path is None:
            return None
        sub = {c: r for c, r in schema.items() if r != drop}
        return load_csv(path, sub)

    return FusionDataset(
        triples=block(triples_path),
        xz_pairs=block(xz_path, drop="y"),
        zy_pairs=block(zy_path, drop="x"),
    )
