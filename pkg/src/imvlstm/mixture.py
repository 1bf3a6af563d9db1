"""Mixture-attention head over variable-wise hidden states.

Per variable ``n`` the head

* scores each hidden state h_t^n with a small tanh net and softmaxes the scores
  over time into temporal attention alpha^n, giving the context
  g^n = sum_t alpha_t^n h_t^n;
* feeds h_T^n (+) g^n to a shared scoring net, softmaxed over variables into
  the mixture prior;
* maps h_T^n (+) g^n through its own net to a Gaussian (mu_n, sigma_n).

Per-variable nets are stored stacked along a leading N axis
(``head.fn.w1`` is [N, a, d]); the checkpoint layer splits them into
``head.fn.{n}.*`` names.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import ndtape as nd
from .ndtape import ContractError, DimensionError, Tensor

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
SOFTPLUS_INV_ONE = math.log(math.e - 1.0)


@dataclass(frozen=True)
class HeadConfig:
    n_vars: int
    per_var_dim: int
    width: int | None = None  # hidden width a of every head net; defaults to d
    sigma_min: float = 1e-3

    @property
    def hidden(self) -> int:
        return self.width or self.per_var_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MixtureOutput:
    alpha: Tensor       # [..., N, T]
    g: Tensor           # [..., N, d]
    prior: Tensor       # [..., N]
    log_prior: Tensor   # [..., N]
    mu: Tensor          # [..., N]
    sigma: Tensor       # [..., N]
    log_comp: Tensor | None = None  # [..., N] log N(y; mu_n, sigma_n^2)
    log_lik: Tensor | None = None   # [...]


def head_param_shapes(cfg: HeadConfig) -> dict[str, tuple[int, ...]]:
    n, d, a = cfg.n_vars, cfg.per_var_dim, cfg.hidden
    return {
        "head.fn.w1": (n, a, d),
        "head.fn.b1": (n, a),
        "head.fn.w2": (n, a),
        "head.fn.b2": (n,),
        "head.f.w1": (a, 2 * d),
        "head.f.b1": (a,),
        "head.f.w2": (1, a),
        "head.phi.w1": (n, a, 2 * d),
        "head.phi.b1": (n, a),
        "head.phi.w2": (n, 2, a),
        "head.phi.b2": (n, 2),
    }


# per-variable tensors: leading axis is the variable index
STACKED_HEAD_PARAMS = ("head.fn.", "head.phi.")


def init_head_params(cfg: HeadConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Weights ~ U(+-1/sqrt(fan_in)), biases zero, sigma bias so sigma starts near 1."""
    params = {}
    for name, shape in head_param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[-1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    params["head.phi.b2"][:, 1] = SOFTPLUS_INV_ONE
    return params


# ------------------------------------------------------------------ pieces

def temporal_attention(hs, scores) -> tuple[Tensor, Tensor]:
    """Softmax ``scores`` [..., T] over time and pool ``hs`` [..., T, d].

    Returns (alpha [..., T], g [..., d]).
    """
    hs, scores = nd.as_tensor(hs), nd.as_tensor(scores)
    if scores.ndim < 1 or scores.shape[-1] == 0:
        raise ValueError("temporal attention needs at least one time step")
    if hs.shape[:-1] != scores.shape:
        raise DimensionError(f"hidden states {hs.shape} do not match scores {scores.shape}")
    alpha = nd.softmax(scores, axis=-1)
    g = nd.sum(nd.reshape(alpha, alpha.shape + (1,)) * hs, axis=-2)
    return alpha, g


def variable_prior(scores) -> Tensor:
    """Softmax of per-variable scores [..., N] into the mixture prior."""
    return nd.softmax(scores, axis=-1)


def component_log_density(y, mu, sigma, sigma_min: float = 0.0) -> Tensor:
    """log N(y; mu, sigma^2), elementwise."""
    sigma = nd.as_tensor(sigma)
    if np.any(sigma.value < sigma_min) or np.any(sigma.value <= 0):
        raise ContractError(f"sigma below floor {sigma_min}: min {sigma.value.min()}")
    z = (nd.as_tensor(y) - mu) / sigma
    return nd.neg(nd.log(sigma)) - 0.5 * nd.square(z) - LOG_SQRT_2PI


def mixture_log_likelihood(y, prior, mu, sigma) -> Tensor:
    """log sum_n prior_n N(y; mu_n, sigma_n^2), via log-sum-exp over the last axis."""
    prior = nd.as_tensor(prior)
    y = nd.as_tensor(y)
    if y.ndim < prior.ndim:
        y = nd.reshape(y, y.shape + (1,))
    with np.errstate(divide="ignore"):
        log_prior = nd.log(prior)
    return nd.logsumexp(log_prior + component_log_density(y, mu, sigma), axis=-1)


def predict(prior, mu) -> np.ndarray:
    """Point forecast: prior-weighted sum of component means."""
    return np.sum(nd.as_tensor(prior).value * nd.as_tensor(mu).value, axis=-1)


# ------------------------------------------------------------------ assembly

def forward_head(hs, params: Mapping, cfg: HeadConfig, y=None) -> MixtureOutput:
    """Run the full head on hidden states ``hs`` [..., T, N, d].

    If ``y`` (shape [...]) is given, the component log densities and the
    mixture log-likelihood are filled in as well.
    """
    hs = nd.as_tensor(hs)
    if hs.ndim < 3 or hs.shape[-3] == 0:
        raise ValueError(f"head needs hidden states [..., T, N, d] with T >= 1, got {hs.shape}")
    p = {k: nd.as_tensor(v) for k, v in params.items() if k.startswith("head.")}
    hn = nd.swapaxes(hs, -3, -2)  # [..., N, T, d]

    # temporal attention per variable
    hid = nd.tanh(nd.tensor_dot(p["head.fn.w1"], hs) + p["head.fn.b1"])      # [..., T, N, a]
    scores = nd.sum(hid * p["head.fn.w2"], axis=-1) + p["head.fn.b2"]         # [..., T, N]
    alpha, g = temporal_attention(hn, nd.swapaxes(scores, -1, -2))

    h_last = hs[..., -1, :, :]
    joint = nd.concat([h_last, g], axis=-1)                                   # [..., N, 2d]

    # shared prior net
    hid_f = nd.tanh(nd.dense(joint, p["head.f.w1"]) + p["head.f.b1"])
    prior_scores = nd.dense(hid_f, p["head.f.w2"])
    prior_scores = nd.reshape(prior_scores, prior_scores.shape[:-1])          # [..., N]
    log_prior = nd.log_softmax(prior_scores, axis=-1)
    prior = variable_prior(prior_scores)

    # per-variable Gaussian parameters
    hid_phi = nd.tanh(nd.tensor_dot(p["head.phi.w1"], joint) + p["head.phi.b1"])
    out = nd.tensor_dot(p["head.phi.w2"], hid_phi) + p["head.phi.b2"]        # [..., N, 2]
    mu = out[..., 0]
    sigma = nd.softplus(out[..., 1]) + cfg.sigma_min

    mix = MixtureOutput(alpha=alpha, g=g, prior=prior, log_prior=log_prior, mu=mu, sigma=sigma)
    if y is not None:
        y = nd.as_tensor(y)
        y_col = nd.reshape(y, y.shape + (1,))
        mix.log_comp = component_log_density(y_col, mu, sigma, cfg.sigma_min)
        mix.log_lik = nd.logsumexp(mix.log_comp + log_prior, axis=-1)
    return mix
