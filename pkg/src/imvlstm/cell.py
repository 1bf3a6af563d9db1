"""IMV-Full and IMV-Tensor recurrent cells.

Every hidden state is an [N, d] matrix whose row ``n`` summarises variable
``n``.  Parameters live in a flat dict keyed by canonical names
(``cell.w_j``, ``cell.gates.W``, ...) so the same mapping feeds the tape, the
optimizer and the checkpoint writer.

Stacked gate tensors are ordered (input, forget, output).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import kernels
from . import ndtape as nd
from .ndtape import ContractError, DimensionError, Tensor

FULL = "full"
TENSOR = "tensor"


class UnsupportedConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CellConfig:
    n_vars: int
    per_var_dim: int
    input_dim_per_var: int = 1
    variant: str = TENSOR
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.n_vars < 1 or self.per_var_dim < 1 or self.input_dim_per_var < 1:
            raise ValueError(f"CellConfig extents must be >= 1: {self}")
        if self.variant not in (FULL, TENSOR):
            raise ValueError(f"unknown variant {self.variant!r}; expected 'full' or 'tensor'")

    @property
    def layer_size(self) -> int:
        return self.n_vars * self.per_var_dim

    def to_dict(self) -> dict:
        return asdict(self)


class CellState(NamedTuple):
    h: Tensor  # [..., N, d]
    c: Tensor  # [..., D] (full) or [..., N, d] (tensor)


def param_shapes(config: CellConfig) -> dict[str, tuple[int, ...]]:
    n, d, d0 = config.n_vars, config.per_var_dim, config.input_dim_per_var
    D = config.layer_size
    shapes = {
        "cell.w_j": (n, d, d),
        "cell.u_j": (n, d, d0),
        "cell.b_j": (n, d),
    }
    if config.variant == FULL:
        shapes["cell.gates.w"] = (3 * D, n * d0 + D)
        shapes["cell.gates.b"] = (3 * D,)
    else:
        shapes["cell.gates.W"] = (n, 3 * d, d)
        shapes["cell.gates.U"] = (n, 3 * d, d0)
        shapes["cell.gates.b"] = (n, 3 * d)
    return shapes


def init_params(config: CellConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Weights ~ U(-1/sqrt(D), 1/sqrt(D)); biases zero except the forget gate."""
    bound = 1.0 / math.sqrt(config.layer_size)
    D, d = config.layer_size, config.per_var_dim
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b") or name.endswith(".b_j"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-bound, bound, size=shape)
    if config.variant == FULL:
        params["cell.gates.b"][D:2 * D] = config.forget_bias
    else:
        params["cell.gates.b"][:, d:2 * d] = config.forget_bias
    return params


def _get(params: Mapping, name: str) -> Tensor:
    try:
        return nd.as_tensor(params[name])
    except KeyError:
        raise ContractError(f"missing cell parameter {name!r}") from None


def hidden_update(params: Mapping, h_prev, x) -> Tensor:
    """Candidate update: tanh(W_j * h_prev + U_j * x + b_j), with * the block product."""
    w_j, u_j, b_j = _get(params, "cell.w_j"), _get(params, "cell.u_j"), _get(params, "cell.b_j")
    return nd.tanh(nd.tensor_dot(w_j, h_prev) + nd.tensor_dot(u_j, x) + b_j)


def zero_state(config: CellConfig, batch_shape: tuple[int, ...] = ()) -> CellState:
    n, d = config.n_vars, config.per_var_dim
    h = Tensor(np.zeros(batch_shape + (n, d)))
    if config.variant == FULL:
        c = Tensor(np.zeros(batch_shape + (n * d,)))
    else:
        c = Tensor(np.zeros(batch_shape + (n, d)))
    return CellState(h, c)


def _check_input(config: CellConfig, h, x) -> None:
    n, d, d0 = config.n_vars, config.per_var_dim, config.input_dim_per_var
    if tuple(h.shape[-2:]) != (n, d):
        raise DimensionError(f"hidden state shape {h.shape} does not end in ({n}, {d})")
    if tuple(x.shape[-2:]) != (n, d0):
        raise DimensionError(f"input shape {x.shape} does not end in ({n}, {d0})")


def step_full(params: Mapping, state: CellState, x, config: CellConfig) -> CellState:
    """One IMV-Full step: dense gates over [x, vec(h_prev)]."""
    if config.variant != FULL:
        raise ContractError(f"step_full called with a {config.variant!r} config")
    x = nd.as_tensor(x)
    h_prev, c_prev = nd.as_tensor(state.h), nd.as_tensor(state.c)
    _check_input(config, h_prev, x)
    n, d, d0 = config.n_vars, config.per_var_dim, config.input_dim_per_var
    D = config.layer_size
    j = hidden_update(params, h_prev, x)
    # x_t is the concatenation of the per-variable vectors
    z = nd.concat([nd.reshape(x, x.shape[:-2] + (n * d0,)), nd.vectorize(h_prev)], axis=-1)
    w, b = _get(params, "cell.gates.w"), _get(params, "cell.gates.b")
    gates = nd.sigmoid(nd.dense(z, w) + b)
    i, f, o = gates[..., :D], gates[..., D:2 * D], gates[..., 2 * D:]
    c = f * c_prev + i * nd.vectorize(j)
    h = nd.matricize(o * nd.tanh(c), n, d)
    return CellState(h, c)


def step_tensor(params: Mapping, state: CellState, x, config: CellConfig) -> CellState:
    """One IMV-Tensor step: every gate is an [N, d] matrix built with the block product."""
    if config.variant != TENSOR:
        raise ContractError(f"step_tensor called with a {config.variant!r} config")
    x = nd.as_tensor(x)
    h_prev, c_prev = nd.as_tensor(state.h), nd.as_tensor(state.c)
    _check_input(config, h_prev, x)
    d = config.per_var_dim
    j = hidden_update(params, h_prev, x)
    W, U, b = _get(params, "cell.gates.W"), _get(params, "cell.gates.U"), _get(params, "cell.gates.b")
    gates = nd.sigmoid(nd.tensor_dot(W, h_prev) + nd.tensor_dot(U, x) + b)
    i, f, o = gates[..., :d], gates[..., d:2 * d], gates[..., 2 * d:]
    c = f * c_prev + i * j
    h = o * nd.tanh(c)
    return CellState(h, c)


def step(params: Mapping, state: CellState, x, config: CellConfig) -> CellState:
    if config.variant == FULL:
        return step_full(params, state, x, config)
    return step_tensor(params, state, x, config)


def _tensor_sequence(params: Mapping, xs: np.ndarray) -> Tensor:
    """Whole IMV-Tensor unroll as one tape node, using the fused kernels."""
    names = ("cell.w_j", "cell.u_j", "cell.b_j", "cell.gates.W", "cell.gates.U", "cell.gates.b")
    ts = [_get(params, k) for k in names]
    w_j, u_j, b_j, W, U, b = (t.value for t in ts)
    d = w_j.shape[1]
    wc = np.ascontiguousarray(np.concatenate([w_j, W], axis=1))
    uc = np.ascontiguousarray(np.concatenate([u_j, U], axis=1))
    bc = np.ascontiguousarray(np.concatenate([b_j, b], axis=1))
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    hs, cache = kernels.forward(wc, uc, bc, xs)

    def vjp(g):
        dwc, duc, dbc = kernels.backward(wc, uc, cache, g)
        return (dwc[:, :d], duc[:, :d], dbc[:, :d], dwc[:, d:], duc[:, d:], dbc[:, d:])
    return nd._record(ts, hs, vjp)


def unroll(params: Mapping, xs, config: CellConfig, fused: bool = True) -> Tensor:
    """Run the cell over ``xs`` [..., T, N, d0] from a zero state.

    Returns the hidden matrices stacked as [..., T, N, d].  For the Tensor
    variant with a single leading batch axis (or none) the fused kernels are
    used unless ``fused`` is False.
    """
    xs_t = nd.as_tensor(xs)
    if xs_t.ndim < 3 or xs_t.shape[-3] == 0:
        raise ValueError(f"unroll needs at least one time step, got input shape {xs_t.shape}")
    n, d0 = config.n_vars, config.input_dim_per_var
    if tuple(xs_t.shape[-2:]) != (n, d0):
        raise DimensionError(f"input shape {xs_t.shape} does not end in ({n}, {d0})")
    T = xs_t.shape[-3]
    if fused and config.variant == TENSOR and xs_t.ndim <= 4 and not xs_t.requires_grad:
        if xs_t.ndim == 3:
            return nd.reshape(_tensor_sequence(params, xs_t.value[None]), (T, n, config.per_var_dim))
        return _tensor_sequence(params, xs_t.value)
    state = zero_state(config, xs_t.shape[:-3])
    hs = []
    for t in range(T):
        state = step(params, state, xs_t[..., t, :, :], config)
        hs.append(state.h)
    return nd.stack(hs, axis=-3)


# ------------------------------------------------------------------ accounting

def count_elements(config: CellConfig) -> int:
    return int(sum(math.prod(s) for s in param_shapes(config).values()))


def count_params(config: CellConfig) -> dict[str, int]:
    """Closed-form parameter counts for a standard LSTM and this variant (d0 = 1 only).

    Standard LSTM of layer size D over N scalar inputs: 4D^2 + 4ND + 4D.
    Reductions: Full saves (N-1)D + (1-1/N)D^2, Tensor saves four times that.
    """
    if config.input_dim_per_var != 1:
        raise UnsupportedConfigError("closed-form parameter counts assume one scalar per variable (d0 = 1)")
    N, D, d = config.n_vars, config.layer_size, config.per_var_dim
    standard = 4 * D * D + 4 * N * D + 4 * D
    # (1 - 1/N) D^2 == D^2 - D d, kept in integers
    base = (N - 1) * D + (D * D - D * d)
    reduction = base if config.variant == FULL else 4 * base
    return {"this_variant": standard - reduction, "standard_lstm": standard, "reduction": reduction}


def step_flop_estimate(config: CellConfig) -> dict[str, int]:
    """Exact multiplies per update step for both variants at this config's shapes."""
    N, d, d0 = config.n_vars, config.per_var_dim, config.input_dim_per_var
    D = N * d
    hidden = N * d * d + N * d * d0
    elementwise = 3 * D  # f*c, i*j, o*tanh(c)
    full = hidden + 3 * D * (N * d0 + D) + elementwise
    tensor = hidden + 3 * N * d * d + 3 * N * d * d0 + elementwise
    return {"full": full, "tensor": tensor}
