"""Batched per-draw model kernels.

Each kernel exists twice: a loop implementation compiled with numba and a
vectorized numpy implementation.  The module-level names (``bt_loglik``,
``hier_logp`` ...) point at the numba versions unless numba is missing or
the environment variable ``DADVI_DISABLE_NUMBA`` is set to a non-empty value
other than ``0``.  Both paths are exported under ``*_numba`` / ``*_numpy`` so
tests and the benchmark can compare them directly.

All kernels take a batch ``theta`` of shape ``(n, dim)``, one row per draw.
"""
import os

import numpy as np


def _numba_requested():
    flag = os.environ.get("DADVI_DISABLE_NUMBA", "")
    return flag in ("", "0")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by DADVI_DISABLE_NUMBA")
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def _njit(func):
    if numba is None:
        return func
    return numba.njit(cache=True, nogil=True)(func)


# ---------------------------------------------------------------------------
# Bradley-Terry match likelihood: sum_k log sigmoid(theta[w_k] - theta[l_k])
# ---------------------------------------------------------------------------


def _log_sigmoid_np(d):
    return -np.logaddexp(0.0, -d)


def _sigmoid_np(d):
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def bt_loglik_numpy(theta, winners, losers):
    d = theta[:, winners] - theta[:, losers]
    return _log_sigmoid_np(d).sum(axis=1)


def bt_grad_numpy(theta, winners, losers):
    d = theta[:, winners] - theta[:, losers]
    r = 1.0 - _sigmoid_np(d)
    n, dim = theta.shape
    out = np.zeros((n, dim))
    rows = np.arange(n)[:, None]
    np.add.at(out, (rows, winners[None, :]), r)
    np.add.at(out, (rows, losers[None, :]), -r)
    return out


def bt_hvp_numpy(theta, v, winners, losers):
    d = theta[:, winners] - theta[:, losers]
    s = _sigmoid_np(d)
    c = s * (1.0 - s) * (v[:, winners] - v[:, losers])
    n, dim = theta.shape
    out = np.zeros((n, dim))
    rows = np.arange(n)[:, None]
    np.add.at(out, (rows, winners[None, :]), -c)
    np.add.at(out, (rows, losers[None, :]), c)
    return out


def _bt_loglik_loop(theta, winners, losers):
    n = theta.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for k in range(winners.shape[0]):
            d = theta[i, winners[k]] - theta[i, losers[k]]
            if d >= 0:
                acc -= np.log1p(np.exp(-d))
            else:
                acc += d - np.log1p(np.exp(d))
        out[i] = acc
    return out


def _bt_grad_loop(theta, winners, losers):
    n, dim = theta.shape
    out = np.zeros((n, dim))
    for i in range(n):
        for k in range(winners.shape[0]):
            w = winners[k]
            l = losers[k]
            d = theta[i, w] - theta[i, l]
            if d >= 0:
                r = 1.0 - 1.0 / (1.0 + np.exp(-d))
            else:
                r = 1.0 / (1.0 + np.exp(d))
            out[i, w] += r
            out[i, l] -= r
    return out


def _bt_hvp_loop(theta, v, winners, losers):
    n, dim = theta.shape
    out = np.zeros((n, dim))
    for i in range(n):
        for k in range(winners.shape[0]):
            w = winners[k]
            l = losers[k]
            d = theta[i, w] - theta[i, l]
            if d >= 0:
                s = 1.0 / (1.0 + np.exp(-d))
            else:
                e = np.exp(d)
                s = e / (1.0 + e)
            c = s * (1.0 - s) * (v[i, w] - v[i, l])
            out[i, w] -= c
            out[i, l] += c
    return out


# ---------------------------------------------------------------------------
# Random-effects normal model, theta = (m, log tau, lambda_1..lambda_P):
#   sum_p [-(y_p - lam_p)^2/2 - (lam_p - m)^2 / (2 tau^2) - log tau]
#   - m^2/2 - tau^2/2 + log tau           (half-normal on tau plus Jacobian)
# ---------------------------------------------------------------------------


def hier_logp_numpy(theta, y):
    m = theta[:, 0]
    s = theta[:, 1]
    lam = theta[:, 2:]
    w = np.exp(-2.0 * s)
    r = lam - m[:, None]
    local = -0.5 * ((y - lam) ** 2).sum(axis=1) - 0.5 * w * (r**2).sum(axis=1)
    local -= y.shape[0] * s
    return local - 0.5 * m**2 - 0.5 * np.exp(2.0 * s) + s


def hier_grad_numpy(theta, y):
    m = theta[:, 0]
    s = theta[:, 1]
    lam = theta[:, 2:]
    w = np.exp(-2.0 * s)
    r = lam - m[:, None]
    out = np.empty_like(theta)
    out[:, 0] = w * r.sum(axis=1) - m
    out[:, 1] = w * (r**2).sum(axis=1) - y.shape[0] - np.exp(2.0 * s) + 1.0
    out[:, 2:] = (y - lam) - w[:, None] * r
    return out


def hier_hvp_numpy(theta, v, y):
    m = theta[:, 0]
    s = theta[:, 1]
    lam = theta[:, 2:]
    w = np.exp(-2.0 * s)
    r = lam - m[:, None]
    P = y.shape[0]
    vm = v[:, 0]
    vs = v[:, 1]
    vl = v[:, 2:]
    sum_r = r.sum(axis=1)
    out = np.empty_like(theta)
    out[:, 0] = (-P * w - 1.0) * vm - 2.0 * w * sum_r * vs + w * vl.sum(axis=1)
    out[:, 1] = (
        -2.0 * w * sum_r * vm
        + (-2.0 * w * (r**2).sum(axis=1) - 2.0 * np.exp(2.0 * s)) * vs
        + 2.0 * w * (r * vl).sum(axis=1)
    )
    out[:, 2:] = (w * vm)[:, None] + 2.0 * (w * vs)[:, None] * r - (1.0 + w)[:, None] * vl
    return out


def _hier_logp_loop(theta, y):
    n = theta.shape[0]
    P = y.shape[0]
    out = np.zeros(n)
    for i in range(n):
        m = theta[i, 0]
        s = theta[i, 1]
        w = np.exp(-2.0 * s)
        acc = 0.0
        for p in range(P):
            lam = theta[i, 2 + p]
            acc -= 0.5 * (y[p] - lam) ** 2 + 0.5 * w * (lam - m) ** 2
        out[i] = acc - P * s - 0.5 * m * m - 0.5 * np.exp(2.0 * s) + s
    return out


def _hier_grad_loop(theta, y):
    n, dim = theta.shape
    P = y.shape[0]
    out = np.zeros((n, dim))
    for i in range(n):
        m = theta[i, 0]
        s = theta[i, 1]
        w = np.exp(-2.0 * s)
        sr = 0.0
        sr2 = 0.0
        for p in range(P):
            lam = theta[i, 2 + p]
            r = lam - m
            sr += r
            sr2 += r * r
            out[i, 2 + p] = (y[p] - lam) - w * r
        out[i, 0] = w * sr - m
        out[i, 1] = w * sr2 - P - np.exp(2.0 * s) + 1.0
    return out


def _hier_hvp_loop(theta, v, y):
    n, dim = theta.shape
    P = y.shape[0]
    out = np.zeros((n, dim))
    for i in range(n):
        m = theta[i, 0]
        s = theta[i, 1]
        w = np.exp(-2.0 * s)
        vm = v[i, 0]
        vs = v[i, 1]
        sr = 0.0
        sr2 = 0.0
        svl = 0.0
        srvl = 0.0
        for p in range(P):
            r = theta[i, 2 + p] - m
            vl = v[i, 2 + p]
            sr += r
            sr2 += r * r
            svl += vl
            srvl += r * vl
            out[i, 2 + p] = w * vm + 2.0 * w * vs * r - (1.0 + w) * vl
        out[i, 0] = (-P * w - 1.0) * vm - 2.0 * w * sr * vs + w * svl
        out[i, 1] = -2.0 * w * sr * vm + (-2.0 * w * sr2 - 2.0 * np.exp(2.0 * s)) * vs + 2.0 * w * srvl
    return out


if HAVE_NUMBA:
    bt_loglik_numba = _njit(_bt_loglik_loop)
    bt_grad_numba = _njit(_bt_grad_loop)
    bt_hvp_numba = _njit(_bt_hvp_loop)
    hier_logp_numba = _njit(_hier_logp_loop)
    hier_grad_numba = _njit(_hier_grad_loop)
    hier_hvp_numba = _njit(_hier_hvp_loop)

    bt_loglik, bt_grad, bt_hvp = bt_loglik_numba, bt_grad_numba, bt_hvp_numba
    hier_logp, hier_grad, hier_hvp = hier_logp_numba, hier_grad_numba, hier_hvp_numba
else:
    bt_loglik_numba = bt_grad_numba = bt_hvp_numba = None
    hier_logp_numba = hier_grad_numba = hier_hvp_numba = None

    bt_loglik, bt_grad, bt_hvp = bt_loglik_numpy, bt_grad_numpy, bt_hvp_numpy
    hier_logp, hier_grad, hier_hvp = hier_logp_numpy, hier_grad_numpy, hier_hvp_numpy

BACKEND = "numba" if HAVE_NUMBA else "numpy"
