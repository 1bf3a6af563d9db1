"""Metrics, variable rankings and selection, synthetic benchmark data."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import SeriesTable, WindowedDataset

AR_COEF = 0.7


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size == 0 or y.size != y_hat.size:
        raise ValueError(f"need equal, non-empty lengths; got {y.size} and {y_hat.size}")
    return y, y_hat


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def metrics_report(y, y_hat) -> dict:
    return {"rmse": rmse(y, y_hat), "mae": mae(y, y_hat), "n_test": int(np.size(y))}


def rank_variables(importance) -> list[int]:
    """Variable indices (0-based) by descending importance; ties go to the lower index."""
    imp = np.asarray(importance, dtype=np.float64)
    return [int(i) for i in np.lexsort((np.arange(imp.size), -imp))]


def importance_report(columns: list[str], var_importance, temporal_importance) -> dict:
    ranking = rank_variables(var_importance)
    return {
        "I": [float(v) for v in var_importance],
        "T": {c: [float(v) for v in row] for c, row in zip(columns, temporal_importance)},
        "ranking": [columns[i] for i in ranking],
    }


def pearson_rank(table: SeriesTable, n_train_rows: int | None = None) -> list[int]:
    """Rank exogenous columns by |corr(x_t, y_{t+1})| over the training rows.

    Returns 0-based column indices into ``table`` (the target, last, is excluded).
    Zero-variance columns score 0.
    """
    vals = table.values if n_train_rows is None else table.values[:n_train_rows]
    if vals.shape[0] < 3:
        raise ValueError("pearson ranking needs at least three rows")
    x, y_next = vals[:-1, :-1], vals[1:, -1]
    xc = x - x.mean(axis=0)
    yc = y_next - y_next.mean()
    denom = np.sqrt((xc ** 2).sum(axis=0) * (yc ** 2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(denom > 0, (xc * yc[:, None]).sum(axis=0) / denom, 0.0)
    return rank_variables(np.abs(rho))


def _exogenous_order(ranking, n_vars: int) -> list[int]:
    return [int(i) for i in ranking if int(i) != n_vars - 1]


def selected_channels(ranking, n_vars: int, fraction: float = 0.5, bottom: bool = False) -> list[int]:
    """Channel indices kept by top-fraction selection, in original order, target last."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    exo = _exogenous_order(ranking, n_vars)
    if sorted(exo) != list(range(n_vars - 1)):
        raise ValueError(f"ranking {list(ranking)} is not a permutation of {n_vars} variables")
    k = math.ceil(fraction * (n_vars - 1))
    chosen = exo[::-1][:k] if bottom else exo[:k]
    return sorted(chosen) + [n_vars - 1]


def select_top_k(dataset: WindowedDataset, ranking, fraction: float = 0.5,
                 bottom: bool = False) -> WindowedDataset:
    """Keep the top ``ceil(fraction*(N-1))`` exogenous channels plus the target.

    ``bottom=True`` keeps the lowest-ranked ones instead (control experiment).
    """
    keep = selected_channels(ranking, dataset.n_vars, fraction, bottom)
    cols = [dataset.columns[i] for i in keep] if dataset.columns else []
    return WindowedDataset(dataset.inputs[:, :, keep], dataset.targets, dataset.split, dataset.starts, cols)


def select_table(table: SeriesTable, ranking, fraction: float = 0.5, bottom: bool = False) -> SeriesTable:
    keep = selected_channels(ranking, table.n_vars, fraction, bottom)
    return table.select([table.columns[i] for i in keep])


# ------------------------------------------------------------------ synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    n_vars: int = 6                      # exogenous series; the target is added on top
    length: int = 2500
    seed: int = 42
    # (1-based variable index, lag, coefficient)
    drivers: tuple = ((1, 2, 0.6), (2, 0, 0.3))
    nonlinear: bool = False
    noise_std: float = 0.1
    window: int = 10

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for idx, lag, _ in self.drivers:
            if not 1 <= idx <= self.n_vars:
                raise ValueError(f"driver variable {idx} outside 1..{self.n_vars}")
            if not 0 <= lag < self.window:
                raise ValueError(f"driver lag {lag} must be in [0, {self.window})")


DEFAULT_SPEC = SyntheticSpec()


def _signal(spec: SyntheticSpec, exo: np.ndarray) -> np.ndarray:
    """Noise-free target: sig[t] is the prediction of y[t+1] from rows <= t."""
    burn = exo.shape[0] - spec.length
    s = np.zeros(spec.length)
    for idx, lag, coef in spec.drivers:
        s += coef * exo[burn - lag: exo.shape[0] - lag, idx - 1]
    return np.tanh(s) if spec.nonlinear else s


def _simulate(spec: SyntheticSpec):
    rng = np.random.default_rng(spec.seed)
    burn = max((lag for _, lag, _ in spec.drivers), default=0) + 1
    n = spec.length + burn
    exo = np.empty((n, spec.n_vars))
    exo[0] = rng.normal(0.0, 1.0 / math.sqrt(1.0 - AR_COEF ** 2), size=spec.n_vars)
    shocks = rng.normal(0.0, 1.0, size=(n - 1, spec.n_vars))
    for t in range(1, n):
        exo[t] = AR_COEF * exo[t - 1] + shocks[t - 1]
    noise = rng.normal(0.0, 1.0, size=spec.length) * spec.noise_std
    sig = _signal(spec, exo)
    y = np.empty(spec.length)
    y[1:] = sig[:-1] + noise[1:]
    # row 0 has no visible history; draw it from the same formula on burn-in rows
    y[0] = (np.tanh if spec.nonlinear else (lambda v: v))(
        sum(c * exo[burn - 1 - lag, i - 1] for i, lag, c in spec.drivers)) + noise[0]
    return exo[burn:], y, sig


def generate_synthetic(spec: SyntheticSpec = DEFAULT_SPEC) -> SeriesTable:
    """Independent AR(1) exogenous series plus y[t+1] = sum c * x_i[t - lag] + noise."""
    exo, y, _ = _simulate(spec)
    cols = [f"x{i + 1}" for i in range(spec.n_vars)] + ["y"]
    return SeriesTable(cols, np.column_stack([exo, y]))


def oracle_predictions(spec: SyntheticSpec = DEFAULT_SPEC) -> np.ndarray:
    """Noise-free y[t+1] for every row t (length L-1), the Bayes-optimal forecast."""
    _, _, sig = _simulate(spec)
    return sig[:-1]


def table_hash(table: SeriesTable) -> str:
    h = hashlib.sha256()
    h.update(",".join(table.columns).encode())
    h.update(np.ascontiguousarray(table.values, dtype="<f8").tobytes())
    return h.hexdigest()
