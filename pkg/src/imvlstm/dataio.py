"""CSV ingestion, train-only standardization and sliding windows."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TIME_COLUMNS = ("timestamp", "time", "date", "datetime")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Malformed or insufficient input data."""


@dataclass
class SeriesTable:
    columns: list[str]
    values: np.ndarray  # [L, N], target last
    dropped_rows: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise DataError(f"table shape {self.values.shape} does not match {len(self.columns)} columns")

    @property
    def target(self) -> str:
        return self.columns[-1]

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    def select(self, names: list[str]) -> "SeriesTable":
        idx = [self.columns.index(c) for c in names]
        return SeriesTable(list(names), self.values[:, idx], self.dropped_rows)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.values:
                w.writerow([repr(float(v)) for v in row])


@dataclass
class Standardization:
    columns: list[str]
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def invert_target(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.std[-1] + self.mean[-1]

    def to_dict(self) -> dict:
        return {c: {"mean": float(m), "std": float(s)}
                for c, m, s in zip(self.columns, self.mean, self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        cols = list(d)
        return cls(cols, np.array([d[c]["mean"] for c in cols]), np.array([d[c]["std"] for c in cols]))


@dataclass
class WindowedDataset:
    inputs: np.ndarray   # [M, T, N]
    targets: np.ndarray  # [M]
    split: np.ndarray    # [M] of "train" / "val" / "test"
    starts: np.ndarray   # [M] first row of each window
    columns: list[str] = field(default_factory=list)

    @property
    def window(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_vars(self) -> int:
        return self.inputs.shape[2]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.split == name
        return self.inputs[m], self.targets[m]


def load_csv(path: str | Path, target_column: str, timestamp_column: str | None = None) -> SeriesTable:
    """Read a headered CSV, drop rows with empty cells and move the target last."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header expected") from None
        if target_column not in header:
            raise DataError(f"{path}: target column {target_column!r} not found; available: {header}")
        skip = {i for i, h in enumerate(header)
                if h == timestamp_column or h.lower() in TIME_COLUMNS}
        keep = [i for i in range(len(header)) if i not in skip]
        rows, dropped = [], 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            cells = [row[i].strip() for i in keep]
            if any(c == "" or c.lower() in ("na", "nan") for c in cells):
                dropped += 1
                continue
            parsed = []
            for i, c in zip(keep, cells):
                try:
                    v = float(c)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {header[i]!r}: non-numeric value {c!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: column {header[i]!r}: non-finite value {c!r}")
                parsed.append(v)
            rows.append(parsed)
    names = [header[i] for i in keep]
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    order = [i for i, n in enumerate(names) if n != target_column] + [names.index(target_column)]
    return SeriesTable([names[i] for i in order], values[:, order], dropped)


def split_counts(n_windows: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """Chronological train/val/test window counts; train always gets at least one."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = max(1, int(round(fractions[0] * n_windows)))
    n_val = min(n_windows - n_train, int(round(fractions[1] * n_windows)))
    return n_train, n_val, n_windows - n_train - n_val


def train_rows(n_rows: int, window: int, fractions=(0.7, 0.1, 0.2)) -> int:
    """Number of leading rows touched by training windows (inputs and targets)."""
    if n_rows <= window:
        raise DataError(f"series of {n_rows} rows is too short for window {window}")
    n_train, _, _ = split_counts(n_rows - window, fractions)
    return n_train + window


def standardize(table: SeriesTable, n_train_rows: int) -> tuple[SeriesTable, Standardization]:
    """Z-score every column with statistics from the first ``n_train_rows`` rows."""
    if n_train_rows < 2:
        raise DataError("standardization needs at least two training rows")
    train = table.values[:n_train_rows]
    mean = train.mean(axis=0)
    std = np.maximum(train.std(axis=0), 1e-8)
    stats = Standardization(list(table.columns), mean, std)
    return SeriesTable(list(table.columns), stats.apply(table.values), table.dropped_rows), stats


def make_windows(table: SeriesTable, window: int, fractions=(0.7, 0.1, 0.2)) -> WindowedDataset:
    """Window i holds rows [i, i+T) and targets the target column of row i+T."""
    L = table.n_rows
    if window < 1:
        raise DataError(f"window must be >= 1, got {window}")
    if L <= window:
        raise DataError(f"series of {L} rows is too short for window {window} (need at least {window + 1})")
    M = L - window
    idx = np.arange(M)[:, None] + np.arange(window)[None, :]
    inputs = table.values[idx]
    targets = table.values[window:, -1].copy()
    n_train, n_val, n_test = split_counts(M, fractions)
    split = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test)
    return WindowedDataset(inputs, targets, split, np.arange(M), list(table.columns))


def prepare(table: SeriesTable, window: int, fractions=(0.7, 0.1, 0.2)) -> tuple[WindowedDataset, Standardization]:
    """Standardize on training rows only, then window."""
    z, stats = standardize(table, train_rows(table.n_rows, window, fractions))
    return make_windows(z, window, fractions), stats
