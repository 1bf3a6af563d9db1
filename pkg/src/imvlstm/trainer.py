"""EM-style training of an IMV cell plus mixture head.

Each mini-batch: forward pass, posterior responsibilities ``q`` computed from
the same (fixed) parameters, one Adam step on

    -sum_n q_n log N(y; mu_n, sigma_n^2) - sum_n q_n log prior_n

with ``q`` held constant.  After each epoch the variable importance is reset
to the epoch mean of ``q`` and the temporal importance to the epoch mean of the
attention rows.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import cell as cellmod
from . import mixture
from . import ndtape as nd
from .cell import CellConfig
from .dataio import Standardization, WindowedDataset
from .evalx import rmse
from .mixture import HeadConfig, MixtureOutput

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_I_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ImportanceState:
    var_importance: np.ndarray       # [N]
    temporal_importance: np.ndarray  # [N, T]

    @classmethod
    def uniform(cls, n_vars: int, window: int) -> "ImportanceState":
        return cls(np.full(n_vars, 1.0 / n_vars), np.full((n_vars, window), 1.0 / window))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    l2_coeff: float = 1e-4
    grad_clip_norm: float | None = 5.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True

    def __post_init__(self):
        problems = []
        if not self.learning_rate > 0:
            problems.append(f"learning_rate must be > 0 (got {self.learning_rate})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0 (got {self.epochs})")
        if self.l2_coeff < 0:
            problems.append(f"l2_coeff must be >= 0 (got {self.l2_coeff})")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            problems.append(f"grad_clip_norm must be > 0 or None (got {self.grad_clip_norm})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("adam betas must lie in [0, 1)")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class Model:
    cell: CellConfig
    head: HeadConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, cell: CellConfig, head: HeadConfig | None = None, seed: int = 0) -> "Model":
        head = head or HeadConfig(cell.n_vars, cell.per_var_dim)
        rng = np.random.default_rng(seed)
        params = cellmod.init_params(cell, rng)
        params.update(mixture.init_head_params(head, rng))
        return cls(cell, head, params)

    def forward(self, xs, y=None, params: Mapping | None = None) -> MixtureOutput:
        """``xs`` is [..., T, N] when d0 == 1, else [..., T, N, d0]."""
        xs = np.asarray(xs, dtype=np.float64)
        if self.cell.input_dim_per_var == 1:
            xs = xs[..., None]
        params = self.params if params is None else params
        hs = cellmod.unroll(params, xs, self.cell)
        return mixture.forward_head(hs, params, self.head, y)

    def predict(self, xs, batch_size: int = 1024) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        out = []
        for s in range(0, xs.shape[0], batch_size):
            mix = self.forward(xs[s:s + batch_size])
            out.append(mixture.predict(mix.prior, mix.mu))
        return np.concatenate(out) if out else np.zeros(0)


# ------------------------------------------------------------------ EM pieces

def posterior(mix: MixtureOutput, y) -> np.ndarray:
    """Responsibilities q_n proportional to prior_n * N(y; mu_n, sigma_n^2), rows summing to 1."""
    y = np.asarray(y, dtype=np.float64)
    mu, sigma = mix.mu.value, mix.sigma.value
    log_comp = -np.log(sigma) - 0.5 * ((y[..., None] - mu) / sigma) ** 2 - mixture.LOG_SQRT_2PI
    lj = log_comp + mix.log_prior.value
    m = lj.max(axis=-1, keepdims=True)
    w = np.exp(lj - m)
    return w / w.sum(axis=-1, keepdims=True)


def optimized_loss(mix: MixtureOutput, q: np.ndarray) -> nd.Tensor:
    """Per-instance -sum q (log N + log prior) with q constant; shape [...]."""
    if mix.log_comp is None:
        raise TrainingError("mixture output lacks component densities; pass y to forward")
    return nd.neg(nd.sum((mix.log_comp + mix.log_prior) * q, axis=-1))


def importance_term(q: np.ndarray, var_importance: np.ndarray) -> np.ndarray:
    """-sum_n q_n log I_n per instance, with I floored at 1e-12."""
    return -(q * np.log(np.maximum(var_importance, LOG_I_FLOOR))).sum(axis=-1)


def instance_loss(mix: MixtureOutput, y, q: np.ndarray, var_importance: np.ndarray) -> np.ndarray:
    """Full three-term EM loss per instance (values only)."""
    if mix.log_comp is None:
        mix = mixture_with_target(mix, y)
    return optimized_loss(mix, q).value + importance_term(q, var_importance)


def mixture_with_target(mix: MixtureOutput, y) -> MixtureOutput:
    y = np.asarray(y, dtype=np.float64)
    log_comp = mixture.component_log_density(y[..., None], mix.mu.value, mix.sigma.value)
    return MixtureOutput(mix.alpha, mix.g, mix.prior, mix.log_prior, mix.mu, mix.sigma, log_comp,
                         nd.logsumexp(log_comp + mix.log_prior.value, axis=-1))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              config: TrainConfig, state: AdamState) -> None:
    """In-place Adam update with bias correction, L2 and optional global-norm clipping."""
    grads = {k: grads[k] + config.l2_coeff * params[k] if config.l2_coeff else grads[k] for k in params}
    clip_by_global_norm(grads, config.grad_clip_norm)
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)


def batch_gradients(model: Model, xs: np.ndarray, y: np.ndarray):
    """One E-step + gradient of the optimized terms for a batch.

    Returns (grads, mix, q, mean optimized loss).
    """
    with nd.Tape() as tape:
        tracked = {k: tape.watch(v, k) for k, v in model.params.items()}
        mix = model.forward(xs, y, tracked)
        q = posterior(mix, y)
        per = optimized_loss(mix, q)
        loss = nd.mean(per)
    grads = nd.backward(tape, loss, tracked)
    return grads, mix, q, float(loss.value)


def em_epoch(model: Model, xs: np.ndarray, ys: np.ndarray, config: TrainConfig,
             importance: ImportanceState, adam: AdamState,
             rng: np.random.Generator | None = None) -> tuple[ImportanceState, float, dict]:
    """One pass over the training windows.

    Returns the new importance state, the mean three-term loss and simplex
    diagnostics of the batches seen.
    """
    M = xs.shape[0]
    if M == 0:
        raise TrainingError("empty training set")
    order = rng.permutation(M) if (rng is not None and config.shuffle) else np.arange(M)
    q_sum = np.zeros(model.cell.n_vars)
    a_sum = np.zeros((model.cell.n_vars, xs.shape[1]))
    total = 0.0
    worst = {"alpha": 0.0, "prior": 0.0, "q": 0.0}
    for bi, s in enumerate(range(0, M, config.batch_size)):
        idx = order[s:s + config.batch_size]
        grads, mix, q, opt_loss = batch_gradients(model, xs[idx], ys[idx])
        batch_loss = opt_loss * len(idx) + float(importance_term(q, importance.var_importance).sum())
        if not math.isfinite(batch_loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"non-finite loss or gradient in batch {bi}")
        adam_step(model.params, grads, config, adam)
        total += batch_loss
        alpha = mix.alpha.value
        q_sum += q.sum(axis=0)
        a_sum += alpha.sum(axis=0)
        worst["alpha"] = max(worst["alpha"], float(np.max(np.abs(alpha.sum(-1) - 1))))
        worst["prior"] = max(worst["prior"], float(np.max(np.abs(mix.prior.value.sum(-1) - 1))))
        worst["q"] = max(worst["q"], float(np.max(np.abs(q.sum(-1) - 1))))
    new = ImportanceState(q_sum / M, a_sum / M)
    return new, total / M, worst


# ------------------------------------------------------------------ checkpoint

@dataclass
class Checkpoint:
    model: Model
    importance: ImportanceState
    standardization: Standardization | None
    window: int
    columns: list[str]
    train: TrainConfig
    meta: dict

    def copy(self) -> "Checkpoint":
        return copy.deepcopy(self)


def _split_head(name: str, value: np.ndarray) -> dict[str, np.ndarray]:
    if name.startswith(mixture.STACKED_HEAD_PARAMS):
        prefix, leaf = name.rsplit(".", 1)
        return {f"{prefix}.{n}.{leaf}": value[n] for n in range(value.shape[0])}
    return {name: value}


def _tensor_json(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def checkpoint_to_dict(ck: Checkpoint) -> dict:
    params = {}
    for k, v in ck.model.params.items():
        for name, arr in _split_head(k, v).items():
            params[name] = _tensor_json(arr)
    cols = ck.columns
    return {
        "format_version": FORMAT_VERSION,
        "config": {
            "cell": ck.model.cell.to_dict(),
            "head": ck.model.head.to_dict(),
            "train": asdict(ck.train),
            "window": ck.window,
            "columns": cols,
        },
        "params": params,
        "importance": {
            "I": [float(v) for v in ck.importance.var_importance],
            "T": {c: [float(v) for v in row] for c, row in zip(cols, ck.importance.temporal_importance)},
        },
        "standardization": ck.standardization.to_dict() if ck.standardization else None,
        "meta": ck.meta,
    }


def checkpoint_from_dict(doc: dict) -> Checkpoint:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}; expected {FORMAT_VERSION}")
    cfg = doc["config"]
    cell_cfg = CellConfig(**cfg["cell"])
    head_cfg = HeadConfig(**cfg["head"])
    raw = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    params = {}
    for name in cellmod.param_shapes(cell_cfg):
        params[name] = raw[name]
    for name, shape in mixture.head_param_shapes(head_cfg).items():
        if name.startswith(mixture.STACKED_HEAD_PARAMS):
            prefix, leaf = name.rsplit(".", 1)
            params[name] = np.stack([raw[f"{prefix}.{n}.{leaf}"] for n in range(shape[0])])
        else:
            params[name] = raw[name]
    cols = cfg["columns"]
    imp = ImportanceState(np.array(doc["importance"]["I"], dtype=np.float64),
                          np.array([doc["importance"]["T"][c] for c in cols], dtype=np.float64))
    std = Standardization.from_dict(doc["standardization"]) if doc.get("standardization") else None
    return Checkpoint(Model(cell_cfg, head_cfg, params), imp, std, cfg["window"], cols,
                      TrainConfig(**cfg["train"]), doc["meta"])


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(ck: Checkpoint, path: str | Path) -> None:
    try:
        atomic_write_text(path, json.dumps(checkpoint_to_dict(ck)))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path: str | Path) -> Checkpoint:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from exc
    return checkpoint_from_dict(doc)


# ------------------------------------------------------------------ fit

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_rmse: float | None
    importance: ImportanceState
    simplex_error: dict


def fit(dataset: WindowedDataset, cell: CellConfig, config: TrainConfig,
        head: HeadConfig | None = None, standardization: Standardization | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> Checkpoint:
    """Train for ``config.epochs`` epochs; return the epoch with the lowest val RMSE.

    Without validation windows the last epoch is returned.  ``meta`` records
    the loss and val RMSE history.
    """
    xs, ys = dataset.part("train")
    if len(ys) == 0:
        raise TrainingError("dataset has no training windows")
    if dataset.n_vars != cell.n_vars:
        raise TrainingError(f"dataset has {dataset.n_vars} variables but the cell expects {cell.n_vars}")
    xv, yv = dataset.part("val")
    model = Model.init(cell, head, seed=config.seed)
    importance = ImportanceState.uniform(cell.n_vars, dataset.window)
    adam = AdamState()
    rng = np.random.default_rng(config.seed + 1)

    def val_score() -> float | None:
        return rmse(yv, model.predict(xv)) if len(yv) else None

    first = val_score()
    best = Checkpoint(copy.deepcopy(model), copy.deepcopy(importance), standardization,
                      dataset.window, list(dataset.columns), config,
                      {"seed": config.seed, "epoch": 0, "val_rmse": first})
    best_val = first
    losses, vals = [], []
    for epoch in range(1, config.epochs + 1):
        importance, loss, worst = em_epoch(model, xs, ys, config, importance, adam, rng)
        v = val_score()
        losses.append(loss)
        vals.append(v)
        log.info("epoch %d loss %.6f val_rmse %s", epoch, loss, v)
        if on_epoch is not None:
            on_epoch(EpochRecord(epoch, loss, v, copy.deepcopy(importance), worst))
        if v is None or best_val is None or v < best_val:
            best_val = v
            best = Checkpoint(copy.deepcopy(model), copy.deepcopy(importance), standardization,
                              dataset.window, list(dataset.columns), config,
                              {"seed": config.seed, "epoch": epoch, "val_rmse": v})
    best.meta["loss_history"] = losses
    best.meta["val_rmse_history"] = vals
    return best
