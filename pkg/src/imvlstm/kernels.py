"""Fused forward / BPTT kernels for a whole IMV-Tensor unroll.

Weights are stacked per variable with row blocks ordered (j, i, f, o): the
candidate update, then the input, forget and output gates.

    wc: [N, 4d, d]   uc: [N, 4d, d0]   bc: [N, 4d]

Internally everything is feature-major with the batch innermost,
``[T, N, features, B]``, so each step is one batched GEMM and the activations
run over contiguous batch vectors.  :func:`forward` and :func:`backward` take
and return batch-major arrays ([B, T, N, ...]) and hide the layout.

Each kernel has a numba and a numpy implementation.  Without SVML, numba cannot
vectorize ``exp``/``tanh``, so the activation-bound forward pass is faster in
numpy and is used in both modes; the accumulation-bound backward pass uses
numba unless ``IMVLSTM_DISABLE_NUMBA`` is set.  ``benchmarks/bench_kernels.py``
times all four.
"""
import math
from typing import NamedTuple

import numpy as np

from ._accel import HAVE_NUMBA, njit


class SeqCache(NamedTuple):
    hs: np.ndarray    # [T, N, d, B]
    cs: np.ndarray    # [T, N, d, B]
    tcs: np.ndarray   # tanh(cs)
    acts: np.ndarray  # [T, N, 4d, B] activated (j, i, f, o)
    xs: np.ndarray    # [T, N, d0, B]


def to_feature_major(a: np.ndarray) -> np.ndarray:
    """[B, T, N, k] -> [T, N, k, B]"""
    return np.ascontiguousarray(a.transpose(1, 2, 3, 0))


def to_batch_major(a: np.ndarray) -> np.ndarray:
    """[T, N, k, B] -> [B, T, N, k]"""
    return np.ascontiguousarray(a.transpose(3, 0, 1, 2))


# ------------------------------------------------------------------ numpy

def forward_numpy(wc, uc, bc, xs):
    T, N, d0, B = xs.shape
    d = wc.shape[2]
    # sigmoid(x) = (1 + tanh(x/2)) / 2, so one tanh call covers all four blocks
    scale = np.full((4 * d, 1), 0.5)
    scale[:d] = 1.0
    w = np.concatenate([wc, uc], axis=2) * scale
    bias = (bc * scale[:, 0])[..., None]
    z = np.zeros((N, d + d0, B))
    hs = np.empty((T, N, d, B))
    cs = np.empty((T, N, d, B))
    tcs = np.empty((T, N, d, B))
    acts = np.empty((T, N, 4 * d, B))
    c = np.zeros((N, d, B))
    for t in range(T):
        z[:, d:] = xs[t]
        a = acts[t]
        np.matmul(w, z, out=a)
        a += bias
        np.tanh(a, out=a)
        gates = a[:, d:]
        gates *= 0.5
        gates += 0.5
        c = a[:, 2 * d:3 * d] * c
        c += a[:, d:2 * d] * a[:, :d]
        cs[t] = c
        np.tanh(c, out=tcs[t])
        np.multiply(a[:, 3 * d:], tcs[t], out=hs[t])
        z[:, :d] = hs[t]
    return hs, cs, tcs, acts


def backward_numpy(wc, uc, xs, hs, cs, tcs, acts, dhs):
    T, N, d, B = hs.shape
    d0 = uc.shape[2]
    wt = np.ascontiguousarray(wc.transpose(0, 2, 1))
    dpre = np.empty((T, N, 4 * d, B))
    dh_next = np.zeros((N, d, B))
    dc_next = np.zeros((N, d, B))
    for t in range(T - 1, -1, -1):
        a = acts[t]
        j, i, f, o = a[:, :d], a[:, d:2 * d], a[:, 2 * d:3 * d], a[:, 3 * d:]
        tc = tcs[t]
        dh = dhs[t] + dh_next
        dc = dh * o * (1.0 - tc * tc)
        dc += dc_next
        dp = dpre[t]
        np.multiply(dc * i, 1.0 - j * j, out=dp[:, :d])
        np.multiply(dc * j, i * (1.0 - i), out=dp[:, d:2 * d])
        if t > 0:
            np.multiply(dc * cs[t - 1], f * (1.0 - f), out=dp[:, 2 * d:3 * d])
        else:
            dp[:, 2 * d:3 * d] = 0.0
        np.multiply(dh * tc, o * (1.0 - o), out=dp[:, 3 * d:])
        dc_next = dc * f
        dh_next = wt @ dp
    # weight gradients as one GEMM over all (t, b): z_t = [h_{t-1}; x_t]
    z = np.empty((T, N, d + d0, B))
    z[0, :, :d] = 0.0
    z[1:, :, :d] = hs[:-1]
    z[:, :, d:] = xs
    dp2 = dpre.transpose(1, 2, 0, 3).reshape(N, 4 * d, T * B)
    z2 = z.transpose(1, 0, 3, 2).reshape(N, T * B, d + d0)
    dw = dp2 @ z2
    return dw[:, :, :d].copy(), dw[:, :, d:].copy(), dp2.sum(axis=2)


# ------------------------------------------------------------------ numba

@njit(cache=True)
def _tanh(x):
    e = math.expm1(-2.0 * abs(x))
    return math.copysign(-e / (2.0 + e), x)


@njit(cache=True)
def forward_loops(wc, uc, bc, xs):
    T, N, d0, B = xs.shape
    d = wc.shape[2]
    r4 = 4 * d
    hs = np.zeros((T, N, d, B))
    cs = np.zeros((T, N, d, B))
    tcs = np.zeros((T, N, d, B))
    acts = np.zeros((T, N, r4, B))
    pre = np.empty(B)
    for n in range(N):
        for t in range(T):
            for r in range(r4):
                for b in range(B):
                    pre[b] = bc[n, r]
                if t > 0:
                    for k in range(d):
                        w = wc[n, r, k]
                        for b in range(B):
                            pre[b] += w * hs[t - 1, n, k, b]
                for k in range(d0):
                    w = uc[n, r, k]
                    for b in range(B):
                        pre[b] += w * xs[t, n, k, b]
                if r < d:
                    for b in range(B):
                        acts[t, n, r, b] = _tanh(pre[b])
                else:
                    for b in range(B):
                        acts[t, n, r, b] = 0.5 + 0.5 * _tanh(0.5 * pre[b])
            for k in range(d):
                for b in range(B):
                    cp = cs[t - 1, n, k, b] if t > 0 else 0.0
                    c = acts[t, n, 2 * d + k, b] * cp + acts[t, n, d + k, b] * acts[t, n, k, b]
                    tc = _tanh(c)
                    cs[t, n, k, b] = c
                    tcs[t, n, k, b] = tc
                    hs[t, n, k, b] = acts[t, n, 3 * d + k, b] * tc
    return hs, cs, tcs, acts


@njit(cache=True)
def backward_loops(wc, uc, xs, hs, cs, tcs, acts, dhs):
    T, N, d, B = hs.shape
    d0 = uc.shape[2]
    r4 = 4 * d
    dwc = np.zeros(wc.shape)
    duc = np.zeros(uc.shape)
    dbc = np.zeros((N, r4))
    dh_next = np.zeros((d, B))
    dc_next = np.zeros((d, B))
    dp = np.empty((r4, B))
    for n in range(N):
        dh_next[:] = 0.0
        dc_next[:] = 0.0
        for t in range(T - 1, -1, -1):
            for k in range(d):
                for b in range(B):
                    jv = acts[t, n, k, b]
                    iv = acts[t, n, d + k, b]
                    fv = acts[t, n, 2 * d + k, b]
                    ov = acts[t, n, 3 * d + k, b]
                    tc = tcs[t, n, k, b]
                    cp = cs[t - 1, n, k, b] if t > 0 else 0.0
                    dh = dhs[t, n, k, b] + dh_next[k, b]
                    dc = dc_next[k, b] + dh * ov * (1.0 - tc * tc)
                    dp[k, b] = dc * iv * (1.0 - jv * jv)
                    dp[d + k, b] = dc * jv * iv * (1.0 - iv)
                    dp[2 * d + k, b] = dc * cp * fv * (1.0 - fv)
                    dp[3 * d + k, b] = dh * tc * ov * (1.0 - ov)
                    dc_next[k, b] = dc * fv
            for r in range(r4):
                s = 0.0
                for b in range(B):
                    s += dp[r, b]
                dbc[n, r] += s
                if t > 0:
                    for k in range(d):
                        s = 0.0
                        for b in range(B):
                            s += dp[r, b] * hs[t - 1, n, k, b]
                        dwc[n, r, k] += s
                for k in range(d0):
                    s = 0.0
                    for b in range(B):
                        s += dp[r, b] * xs[t, n, k, b]
                    duc[n, r, k] += s
            for k in range(d):
                for b in range(B):
                    dh_next[k, b] = 0.0
                for r in range(r4):
                    w = wc[n, r, k]
                    for b in range(B):
                        dh_next[k, b] += w * dp[r, b]
    return dwc, duc, dbc


# ------------------------------------------------------------------ dispatch

def forward(wc, uc, bc, xs) -> tuple[np.ndarray, SeqCache]:
    """Unroll from a zero state.  ``xs`` is [B, T, N, d0]; returns hs [B, T, N, d] and the cache."""
    x_fm = to_feature_major(np.asarray(xs, dtype=np.float64))
    hs, cs, tcs, acts = forward_numpy(wc, uc, bc, x_fm)
    return to_batch_major(hs), SeqCache(hs, cs, tcs, acts, x_fm)


def backward(wc, uc, cache: SeqCache, dhs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dwc, duc, dbc) given the adjoint ``dhs`` [B, T, N, d] of the hidden states."""
    g = to_feature_major(np.asarray(dhs, dtype=np.float64))
    impl = backward_loops if HAVE_NUMBA else backward_numpy
    return impl(wc, uc, cache.xs, cache.hs, cache.cs, cache.tcs, cache.acts, g)
