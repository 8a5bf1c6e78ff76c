"""Fused batch-norm + relu loops over a [C, M] view (statistics per row).

Reductions may be reassociated for vectorisation; the compiled order is
still fixed, so results are bit-reproducible run to run on one machine.
"""

import numpy as np
from numba import njit

_FLAGS = {"reassoc", "nsz"}


@njit(cache=True, fastmath=_FLAGS)
def bn_relu_forward(x, gamma, beta, eps, use_batch_stats, run_mean, run_var):
    c, m = x.shape
    out = np.empty_like(x)
    mean = np.empty(c)
    var = np.empty(c)
    inv_std = np.empty(c)
    for i in range(c):
        if use_batch_stats:
            s = 0.0
            for j in range(m):
                s += x[i, j]
            mu = s / m
            ss = 0.0
            for j in range(m):
                d = x[i, j] - mu
                ss += d * d
            v = ss / m
        else:
            mu = run_mean[i]
            v = run_var[i]
        mean[i] = mu
        var[i] = v
        inv = 1.0 / np.sqrt(v + eps)
        inv_std[i] = inv
        a = gamma[i] * inv
        b = beta[i] - mu * a
        for j in range(m):
            y = x[i, j] * a + b
            out[i, j] = y if y > 0.0 else 0.0
    return out, mean, var, inv_std


@njit(cache=True, fastmath=_FLAGS)
def bn_relu_backward(g, x, out, gamma, mean, inv_std, use_batch_stats):
    c, m = x.shape
    dx = np.empty_like(x)
    dgamma = np.empty(c)
    dbeta = np.empty(c)
    for i in range(c):
        mu = mean[i]
        inv = inv_std[i]
        sg = 0.0
        sgx = 0.0
        for j in range(m):
            gj = g[i, j] if out[i, j] > 0.0 else 0.0
            sg += gj
            sgx += gj * (x[i, j] - mu)
        sgx *= inv
        dgamma[i] = sgx
        dbeta[i] = sg
        scale = gamma[i] * inv
        if use_batch_stats:
            mg = sg / m
            mgx = sgx / m
            for j in range(m):
                gj = g[i, j] if out[i, j] > 0.0 else 0.0
                dx[i, j] = scale * (gj - mg - (x[i, j] - mu) * inv * mgx)
        else:
            for j in range(m):
                dx[i, j] = scale * g[i, j] if out[i, j] > 0.0 else 0.0
    return dx, dgamma, dbeta


@njit(cache=True, fastmath=_FLAGS)
def dwconv3x3_forward(x, w):
    """x: [C, K, T, N]; w: [C, 3, 3]; zero padding 1."""
    c, k, t, n = x.shape
    out = np.zeros_like(x)
    for ch in range(c):
        for r in range(k):
            for s in range(t):
                for i in range(3):
                    rr = r + i - 1
                    if rr < 0 or rr >= k:
                        continue
                    for j in range(3):
                        ss = s + j - 1
                        if ss < 0 or ss >= t:
                            continue
                        wv = w[ch, i, j]
                        for b in range(n):
                            out[ch, r, s, b] += wv * x[ch, rr, ss, b]
    return out


@njit(cache=True, fastmath=_FLAGS)
def dwconv3x3_backward(g, x, w):
    c, k, t, n = x.shape
    gx = np.zeros_like(x)
    gw = np.zeros((c, 3, 3))
    for ch in range(c):
        for r in range(k):
            for s in range(t):
                for i in range(3):
                    rr = r + i - 1
                    if rr < 0 or rr >= k:
                        continue
                    for j in range(3):
                        ss = s + j - 1
                        if ss < 0 or ss >= t:
                            continue
                        wv = w[ch, i, j]
                        acc = 0.0
                        for b in range(n):
                            gv = g[ch, r, s, b]
                            acc += gv * x[ch, rr, ss, b]
                            gx[ch, rr, ss, b] += wv * gv
                        gw[ch, i, j] += acc
    return gx, gw
