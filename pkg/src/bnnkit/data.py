"""CSV ingestion, train/test splitting, normalization, synthetic generators."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import CsvFormatError
from .numerics import RngStream, mix_seed, ols_fit


@dataclass
class NormalizationRecord:
    """Per-column statistics fitted on a training split."""

    feature_means: np.ndarray
    feature_sds: np.ndarray
    target_mean: float
    target_sd: float

    def to_dict(self) -> dict:
        return {
            "feature_means": self.feature_means.tolist(),
            "feature_sds": self.feature_sds.tolist(),
            "target_mean": self.target_mean,
            "target_sd": self.target_sd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationRecord":
        return cls(
            feature_means=np.asarray(d["feature_means"], dtype=float),
            feature_sds=np.asarray(d["feature_sds"], dtype=float),
            target_mean=float(d["target_mean"]),
            target_sd=float(d["target_sd"]),
        )


@dataclass
class Dataset:
    """Feature matrix plus target vector, optionally carrying its normalization."""

    X: np.ndarray
    y: np.ndarray
    norm: NormalizationRecord | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def denormalize_targets(self, values: np.ndarray) -> np.ndarray:
        if self.norm is None:
            return np.asarray(values, dtype=float)
        return np.asarray(values, dtype=float) * self.norm.target_sd + self.norm.target_mean


@dataclass
class RawTable:
    """Parsed numeric table with a designated target column."""

    columns: list[str]
    rows: np.ndarray
    target_column: str
    n_rejected: int = 0

    def __post_init__(self):
        if self.target_column not in self.columns:
            raise CsvFormatError(f"target column {self.target_column!r} not among {self.columns}")

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def feature_columns(self) -> list[str]:
        return [c for c in self.columns if c != self.target_column]

    def feature_matrix(self) -> np.ndarray:
        idx = [i for i, c in enumerate(self.columns) if c != self.target_column]
        return self.rows[:, idx]

    def target_vector(self) -> np.ndarray:
        return self.rows[:, self.columns.index(self.target_column)]

    @classmethod
    def from_arrays(cls, X: np.ndarray, y: np.ndarray) -> "RawTable":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        cols = [f"x{i + 1}" for i in range(X.shape[1])] + ["target"]
        return cls(columns=cols, rows=np.column_stack([X, y]), target_column="target")


@dataclass(frozen=True)
class SplitSpec:
    """Seeded train/test split; replicate index derives its own split seed."""

    test_fraction: float = 0.2
    seed: int = 0
    replicate: int = 0

    def __post_init__(self):
        if not (0.0 < self.test_fraction < 1.0):
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")

    def split_seed(self) -> int:
        return mix_seed(self.seed, "split", self.replicate)


def load_csv(path, target_column: str, expected_rows: int | None = None,
             expected_features: int | None = None) -> RawTable:
    """Parse a numeric CSV with header.

    Rows containing empty cells are dropped (counted in n_rejected); any
    non-numeric cell is a hard error addressed by line and column.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if target_column not in header:
            raise CsvFormatError(f"{path}: no column named {target_column!r} in header {header}")
        rows = []
        n_rejected = 0
        for line_no, record in enumerate(reader, start=2):
            if not record or all(cell.strip() == "" for cell in record):
                continue
            if len(record) != len(header):
                raise CsvFormatError(
                    f"{path}: expected {len(header)} cells, found {len(record)}", line=line_no
                )
            if any(cell.strip() == "" for cell in record):
                n_rejected += 1
                continue
            parsed = []
            for col_no, cell in enumerate(record, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: non-numeric cell {cell!r}", line=line_no, column=col_no
                    ) from None
            rows.append(parsed)
    if not rows:
        raise CsvFormatError(f"{path}: no usable data rows ({n_rejected} rejected)")
    table = RawTable(columns=header, rows=np.asarray(rows, dtype=float),
                     target_column=target_column, n_rejected=n_rejected)
    if expected_rows is not None and table.n_rows != expected_rows:
        raise CsvFormatError(f"{path}: expected {expected_rows} rows, parsed {table.n_rows}")
    if expected_features is not None and len(table.feature_columns) != expected_features:
        raise CsvFormatError(
            f"{path}: expected {expected_features} feature columns, "
            f"parsed {len(table.feature_columns)}"
        )
    return table


def subsample_table(table: RawTable, max_rows: int, rng: RngStream) -> RawTable:
    """Deterministically subsample large tables down to max_rows."""
    if max_rows <= 0 or table.n_rows <= max_rows:
        return table
    gen = rng.substream("subsample").generator()
    keep = np.sort(gen.choice(table.n_rows, size=max_rows, replace=False))
    return RawTable(columns=list(table.columns), rows=table.rows[keep],
                    target_column=table.target_column, n_rejected=table.n_rejected)


def normalize_split(table: RawTable, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Split by seeded permutation, then normalize with train-split statistics.

    Both splits get the train statistics applied, so test columns generally
    do not have exactly zero mean.
    """
    n = table.n_rows
    if n < 10:
        raise ValueError(f"need at least 10 rows to split, got {n}")
    gen = RngStream(spec.split_seed(), 0).generator()
    perm = gen.permutation(n)
    n_test = max(1, int(round(n * spec.test_fraction)))
    if n_test >= n:
        raise ValueError("test fraction leaves no training rows")
    test_idx, train_idx = perm[:n_test], perm[n_test:]

    X, y = table.feature_matrix(), table.target_vector()
    mu = X[train_idx].mean(axis=0)
    sd = X[train_idx].std(axis=0)
    for j, s in enumerate(sd):
        if s < 1e-12:
            raise ValueError(
                f"feature column {table.feature_columns[j]!r} has zero variance on the train split"
            )
    ty_mean = float(y[train_idx].mean())
    ty_sd = float(y[train_idx].std())
    if ty_sd < 1e-12:
        raise ValueError(f"target column {table.target_column!r} has zero variance on the train split")

    record = NormalizationRecord(mu, sd, ty_mean, ty_sd)
    def _apply(idx):
        return Dataset(X=(X[idx] - mu) / sd, y=(y[idx] - ty_mean) / ty_sd, norm=record)
    return _apply(train_idx), _apply(test_idx)


SYNTH_KINDS = ("linear", "sine", "friedman")


def synth_regression(kind: str, n: int, noise_sd: float, rng: RngStream):
    """Reproducible synthetic regression data with a known generating process.

    Returns (dataset, params) where dataset is unnormalized and params holds
    the generating quantities used by oracle tests.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}, expected one of {SYNTH_KINDS}")
    gen = rng.generator()
    if kind == "linear":
        p = 3
        X = gen.normal(size=(n, p))
        beta = np.array([1.5, -2.0, 0.5])
        intercept = 0.7
        y = intercept + X @ beta + noise_sd * gen.normal(size=n)
        params = {"beta": beta, "intercept": intercept, "noise_sd": noise_sd}
    elif kind == "sine":
        X = gen.uniform(-3.0, 3.0, size=(n, 1))
        y = np.sin(2.0 * X[:, 0]) + noise_sd * gen.normal(size=n)
        params = {"frequency": 2.0, "noise_sd": noise_sd}
    else:
        X = gen.uniform(0.0, 1.0, size=(n, 5))
        y = (10.0 * np.sin(math.pi * X[:, 0] * X[:, 1]) + 20.0 * (X[:, 2] - 0.5) ** 2
             + 10.0 * X[:, 3] + 5.0 * X[:, 4]) + noise_sd * gen.normal(size=n)
        params = {"noise_sd": noise_sd}
    return Dataset(X=X, y=y, norm=None), params


def write_dataset_cache(dataset: Dataset, csv_path, json_path) -> None:
    """Persist a normalized dataset as CSV plus its normalization record as JSON."""
    table = RawTable.from_arrays(dataset.X, dataset.y)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([format(v, ".17g") for v in row])
    if dataset.norm is not None:
        with open(json_path, "w") as fh:
            json.dump(dataset.norm.to_dict(), fh, indent=2, sort_keys=True)


def lm_rmse_on(train: Dataset, test: Dataset) -> float:
    """Test RMSE of the intercept-augmented least-squares fit (shared yardstick)."""
    coef, _ = ols_fit(train.X, train.y)
    pred = coef[0] + test.X @ coef[1:]
    return float(np.sqrt(np.mean((test.y - pred) ** 2)))
