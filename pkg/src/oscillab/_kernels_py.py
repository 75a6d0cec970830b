"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import math

import numpy as np

_CHUNK = 256


def quadratic_phase_sum(x, y, v, alpha, beta, gamma):
    """out[j] = sum_m exp(i(alpha x_j^2 + beta x_j y_m + gamma y_m^2)) v[m]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.exp(1j * gamma * y * y) * np.asarray(v, dtype=complex)
    out = np.empty(len(x), dtype=complex)
    for s in range(0, len(x), _CHUNK):
        xs = x[s : s + _CHUNK]
        out[s : s + _CHUNK] = np.exp(1j * beta * np.outer(xs, y)) @ w
    return out * np.exp(1j * alpha * x * x)


def sinc_resample(x0, dx, u, y):
    """Band-limited interpolant sum_m u_m sinc((y - x_m)/dx) at points y.

    With t = h + f (h the nearest integer), sin(pi t) = (-1)^h sin(pi f) and
    t - m = (h - m) + f, which keeps points next to a node accurate.
    """
    u = np.asarray(u, dtype=complex)
    n = len(u)
    t = (np.asarray(y, dtype=float) - x0) / dx
    hit = np.rint(t)
    frac = t - hit
    m = np.arange(n)
    alt = np.where(m % 2 == 0, 1.0, -1.0) * u
    out = np.empty(len(t), dtype=complex)
    for s in range(0, len(t), _CHUNK):
        hs, fs = hit[s : s + _CHUNK], frac[s : s + _CHUNK]
        diff = (hs[:, None] - m[None, :]) + fs[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            acc = (1.0 / diff) @ alt
        sign = np.where(hs % 2 == 0, 1.0, -1.0)
        res = sign * np.sin(np.pi * fs) / np.pi * acc
        exact = np.flatnonzero((fs == 0) & (hs >= 0) & (hs < n))
        res[exact] = u[hs[exact].astype(int)]
        res[(fs == 0) & ((hs < 0) | (hs >= n))] = 0.0
        out[s : s + _CHUNK] = res
    return out


def hermite_table(x, nmax):
    """h_0..h_nmax at the points x, shape (nmax+1, len(x)), log-rescaled recurrence."""
    x = np.asarray(x, dtype=float)
    out = np.zeros((nmax + 1, len(x)))
    logs = -0.25 * math.log(math.pi) - 0.5 * x * x
    hm = np.zeros_like(x)
    h = np.ones_like(x)
    out[0] = np.exp(logs)
    big = 1e150
    for n in range(nmax):
        hp = math.sqrt(2.0 / (n + 1)) * x * h - math.sqrt(n / (n + 1)) * hm
        hm, h = h, hp
        over = np.abs(h) > big
        if over.any():
            h[over] /= big
            hm[over] /= big
            logs[over] += math.log(big)
        with np.errstate(divide="ignore"):
            mag = np.exp(logs + np.log(np.abs(h)))
        out[n + 1] = np.where(h == 0, 0.0, np.copysign(mag, h))
    return out
