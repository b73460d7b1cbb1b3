# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels; see ``_pykernels`` for the contracts."""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void rgemm(char ta, char tb, int m, int n, int k, double alpha,
                       const double* A, int lda, const double* B, int ldb,
                       double beta, double* C, int ldc) noexcept nogil:
    # row-major C(m,n) = alpha * op(A) @ op(B) + beta * C via column-major BLAS
    dgemm(&tb, &ta, &n, &m, &k, &alpha, <double*>B, &ldb, <double*>A, &lda, &beta, C, &ldc)


def cfc_scan_forward(double[:, :, ::1] xu, double[:, ::1] w_bh, double[:, ::1] w_heads,
                     double[::1] b_heads, double[:, ::1] dt, long[::1] lengths):
    cdef int bsz = xu.shape[0], tmax = xu.shape[1], units = xu.shape[2]
    cdef int d = w_bh.shape[0], d3 = 3 * w_bh.shape[0]
    cdef int n = 0, b, t, j
    for b in range(bsz):
        if lengths[b] > n:
            n = <int>lengths[b]
    a_np = np.zeros((bsz, tmax, units))
    f_np = np.zeros((bsz, tmax, d))
    g_np = np.zeros((bsz, tmax, d))
    k_np = np.zeros((bsz, tmax, d))
    s_np = np.zeros((bsz, tmax, d))
    h_np = np.zeros((bsz, tmax, d))
    # per-step scratch; transcendental functions go through numpy's vectorised ufuncs
    at_np = np.empty((bsz, units))
    heads_np = np.empty((bsz, d3))
    gate_np = np.empty((bsz, d))
    gk_np = heads_np[:, d:]
    cdef double[:, :, ::1] a = a_np, f = f_np, g = g_np, k = k_np, s = s_np, h = h_np
    cdef double[:, ::1] at = at_np, heads = heads_np, gate = gate_np
    cdef double fv, sv
    for t in range(n):
        with nogil:
            for b in range(bsz):
                for j in range(units):
                    at[b, j] = xu[b, t, j]
            if t > 0:
                rgemm(b'N', b'N', bsz, units, d, 1.0, &h[0, t - 1, 0], tmax * d,
                      &w_bh[0, 0], units, 1.0, &at[0, 0], units)
        np.tanh(at_np, out=at_np)
        with nogil:
            rgemm(b'N', b'N', bsz, d3, units, 1.0, &at[0, 0], units,
                  &w_heads[0, 0], d3, 0.0, &heads[0, 0], d3)
            for b in range(bsz):
                for j in range(d3):
                    heads[b, j] += b_heads[j]
                for j in range(d):
                    gate[b, j] = -0.5 * heads[b, j] * dt[b, t]
        np.tanh(gk_np, out=gk_np)
        np.tanh(gate_np, out=gate_np)
        with nogil:
            for b in range(bsz):
                for j in range(units):
                    a[b, t, j] = at[b, j]
                for j in range(d):
                    fv = heads[b, j]
                    sv = 0.5 * (1.0 + gate[b, j])
                    f[b, t, j] = fv
                    g[b, t, j] = heads[b, d + j]
                    k[b, t, j] = heads[b, 2 * d + j]
                    s[b, t, j] = sv
                    h[b, t, j] = sv * heads[b, d + j] + (1.0 - sv) * heads[b, 2 * d + j]
    out = h_np.copy()
    for b in range(bsz):
        out[b, lengths[b]:] = 0.0
    return out, (a_np, f_np, g_np, k_np, s_np, h_np)


def cfc_scan_backward(double[:, :, ::1] dh_out, double[:, ::1] w_bh, double[:, ::1] w_heads,
                      double[:, ::1] dt, long[::1] lengths, cache):
    a_np, f_np, g_np, k_np, s_np, h_np = cache
    cdef double[:, :, ::1] a = a_np, g = g_np, k = k_np, s = s_np, h = h_np
    cdef int bsz = a.shape[0], tmax = a.shape[1], units = a.shape[2]
    cdef int d = w_bh.shape[0], d3 = 3 * w_bh.shape[0]
    cdef int n = 0, b, t, j
    for b in range(bsz):
        if lengths[b] > n:
            n = <int>lengths[b]
    dxu_np = np.zeros((bsz, tmax, units))
    dwbh_np = np.zeros((d, units))
    dwh_np = np.zeros((units, d3))
    dbh_np = np.zeros(d3)
    dheads_np = np.zeros((bsz, d3))
    dhn_np = np.zeros((bsz, d))
    cdef double[:, :, ::1] dxu = dxu_np
    cdef double[:, ::1] dwbh = dwbh_np, dwh = dwh_np, dheads = dheads_np, dhn = dhn_np
    cdef double[::1] dbh = dbh_np
    cdef double dh, sv, gv, kv, dpg, av
    with nogil:
        for t in range(n - 1, -1, -1):
            for b in range(bsz):
                for j in range(d):
                    dh = dhn[b, j]
                    if t < lengths[b]:
                        dh = dh + dh_out[b, t, j]
                    sv = s[b, t, j]
                    gv = g[b, t, j]
                    kv = k[b, t, j]
                    dpg = dh * (gv - kv) * sv * (1.0 - sv)
                    dheads[b, j] = -dpg * dt[b, t]
                    dheads[b, d + j] = dh * sv * (1.0 - gv * gv)
                    dheads[b, 2 * d + j] = dh * (1.0 - sv) * (1.0 - kv * kv)
            for b in range(bsz):
                for j in range(d3):
                    dbh[j] += dheads[b, j]
            rgemm(b'T', b'N', units, d3, bsz, 1.0, &a[0, t, 0], tmax * units,
                  &dheads[0, 0], d3, 1.0, &dwh[0, 0], d3)
            rgemm(b'N', b'T', bsz, units, d3, 1.0, &dheads[0, 0], d3,
                  &w_heads[0, 0], d3, 0.0, &dxu[0, t, 0], tmax * units)
            for b in range(bsz):
                for j in range(units):
                    av = a[b, t, j]
                    dxu[b, t, j] = dxu[b, t, j] * (1.0 - av * av)
            if t > 0:
                rgemm(b'T', b'N', d, units, bsz, 1.0, &h[0, t - 1, 0], tmax * d,
                      &dxu[0, t, 0], tmax * units, 1.0, &dwbh[0, 0], units)
                rgemm(b'N', b'T', bsz, d, units, 1.0, &dxu[0, t, 0], tmax * units,
                      &w_bh[0, 0], units, 0.0, &dhn[0, 0], d)
    return dxu_np, dwbh_np, dwh_np, dbh_np


def feature_deltas(double[:, ::1] timestamps, double[:, :, ::1] mask, long[::1] lengths):
    cdef int nb = mask.shape[0], tmax = mask.shape[1], nf = mask.shape[2]
    cdef int i, t, j
    cdef double gap
    out_np = np.zeros((nb, tmax, nf))
    cdef double[:, :, ::1] out = out_np
    with nogil:
        for i in range(nb):
            for t in range(1, lengths[i]):
                gap = timestamps[i, t] - timestamps[i, t - 1]
                for j in range(nf):
                    if mask[i, t - 1, j] > 0:
                        out[i, t, j] = gap
                    else:
                        out[i, t, j] = out[i, t - 1, j] + gap
    return out_np
