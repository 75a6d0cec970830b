# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled O(N^2) kernels.  Signatures mirror ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, exp, log, sqrt, fabs, copysign, floor, M_PI

cnp.import_array()


def quadratic_phase_sum(const double[::1] x, const double[::1] y,
                        const double complex[::1] v,
                        double alpha, double beta, double gamma):
    """out[j] = sum_m exp(i(alpha x_j^2 + beta x_j y_m + gamma y_m^2)) v[m]."""
    cdef Py_ssize_t nx = x.shape[0], ny = y.shape[0], j, m
    cdef double[::1] ax = np.empty(nx)
    cdef double[::1] gy = np.empty(ny)
    cdef double[::1] vr = np.empty(ny)
    cdef double[::1] vi = np.empty(ny)
    cdef cnp.ndarray[cnp.complex128_t, ndim=1] out = np.empty(nx, dtype=np.complex128)
    cdef double th, c, s, sr, si, bx
    for m in range(ny):
        gy[m] = gamma * y[m] * y[m]
        vr[m] = v[m].real
        vi[m] = v[m].imag
    for j in range(nx):
        ax[j] = alpha * x[j] * x[j]
    with nogil:
        for j in range(nx):
            sr = 0.0
            si = 0.0
            bx = beta * x[j]
            for m in range(ny):
                th = ax[j] + bx * y[m] + gy[m]
                c = cos(th)
                s = sin(th)
                sr = sr + c * vr[m] - s * vi[m]
                si = si + c * vi[m] + s * vr[m]
            out[j] = sr + 1j * si
    return out


def sinc_resample(double x0, double dx, const double complex[::1] u,
                  const double[::1] y):
    """Band-limited interpolant sum_m u_m sinc((y - x_m)/dx) at points y."""
    cdef Py_ssize_t n = u.shape[0], ny = y.shape[0], j, m
    cdef cnp.ndarray[cnp.complex128_t, ndim=1] out = np.empty(ny, dtype=np.complex128)
    cdef double[::1] ar = np.empty(n)
    cdef double[::1] ai = np.empty(n)
    cdef double t, sr, si, pref, r, frac
    cdef long hit
    for m in range(n):
        # (-1)^m u_m
        if m % 2 == 0:
            ar[m] = u[m].real
            ai[m] = u[m].imag
        else:
            ar[m] = -u[m].real
            ai[m] = -u[m].imag
    with nogil:
        for j in range(ny):
            t = (y[j] - x0) / dx
            # t = hit + frac; sin(pi t) = (-1)^hit sin(pi frac) keeps points
            # next to a node accurate
            hit = <long>floor(t + 0.5)
            frac = t - <double>hit
            if frac == 0.0:
                if hit >= 0 and hit < n:
                    out[j] = u[hit]
                else:
                    out[j] = 0.0
                continue
            sr = 0.0
            si = 0.0
            for m in range(n):
                r = 1.0 / (<double>(hit - m) + frac)
                sr = sr + ar[m] * r
                si = si + ai[m] * r
            pref = sin(M_PI * frac) / M_PI
            if hit % 2 != 0:
                pref = -pref
            out[j] = pref * (sr + 1j * si)
    return out


def hermite_table(const double[::1] x, Py_ssize_t nmax):
    """h_0..h_nmax at the points x, shape (nmax+1, len(x)).

    The three-term recurrence runs on a mantissa with a separate log scale so
    that exp(-x^2/2) never underflows before the polynomial growth cancels it.
    """
    cdef Py_ssize_t nx = x.shape[0], i, n
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((nmax + 1, nx))
    cdef double[:, ::1] o = out
    cdef double[::1] logs = np.empty(nx)
    cdef double[::1] scale = np.empty(nx)
    cdef double[::1] hm = np.zeros(nx)
    cdef double[::1] h = np.ones(nx)
    cdef double hp, a, b, big = 1e150, lbig = log(1e150)
    cdef double lq = -0.25 * log(M_PI)
    with nogil:
        for i in range(nx):
            logs[i] = lq - 0.5 * x[i] * x[i]
            scale[i] = exp(logs[i])
            o[0, i] = scale[i]
        for n in range(nmax):
            a = sqrt(2.0 / (n + 1.0))
            b = sqrt(n / (n + 1.0))
            for i in range(nx):
                hp = a * x[i] * h[i] - b * hm[i]
                hm[i] = h[i]
                h[i] = hp
                if fabs(hp) > big:
                    h[i] = hp / big
                    hm[i] = hm[i] / big
                    logs[i] = logs[i] + lbig
                    scale[i] = exp(logs[i])
                if logs[i] > -700.0:
                    o[n + 1, i] = h[i] * scale[i]
                elif h[i] != 0.0:
                    o[n + 1, i] = copysign(exp(logs[i] + log(fabs(h[i]))), h[i])
    return out
