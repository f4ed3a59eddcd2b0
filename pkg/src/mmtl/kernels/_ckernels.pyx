# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the fused GRU and attention kernels.

Matrix products go to BLAS through numpy; everything elementwise (gates,
masking, softmax, their derivatives) runs in single fused passes without
temporaries. Signatures and return values mirror ``_fallback``; arrays must
be C-contiguous and share one floating dtype.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, tanh

cnp.import_array()


cdef inline double _sig(double a) noexcept nogil:
    cdef double ea
    if a >= 0:
        return 1.0 / (1.0 + exp(-a))
    ea = exp(a)
    return ea / (1.0 + ea)


def _gru_forward(floating[:, ::1] h_prev, floating[::1] mask, floating[::1] b,
                 floating[:, ::1] rmask, x, W, U):
    cdef Py_ssize_t B = h_prev.shape[0], H = h_prev.shape[1]
    cdef Py_ssize_t n, k
    dt = np.asarray(h_prev).dtype
    hd_arr = np.empty((B, H), dtype=dt)
    cdef floating[:, ::1] hd = hd_arr
    with nogil:
        for n in range(B):
            for k in range(H):
                hd[n, k] = h_prev[n, k] * rmask[n, k]
    a_arr = np.dot(x, W)
    azr_arr = np.dot(hd_arr, U[:, : 2 * H])
    z_arr = np.empty((B, H), dtype=dt)
    r_arr = np.empty((B, H), dtype=dt)
    q_arr = np.empty((B, H), dtype=dt)
    cdef floating[:, ::1] a = a_arr, azr = azr_arr, z = z_arr, r = r_arr, q = q_arr
    with nogil:
        for n in range(B):
            for k in range(H):
                z[n, k] = <floating>_sig(a[n, k] + b[k] + azr[n, k])
                r[n, k] = <floating>_sig(a[n, H + k] + b[H + k] + azr[n, H + k])
                q[n, k] = r[n, k] * hd[n, k]
    ac_arr = np.dot(q_arr, U[:, 2 * H :])
    h_arr = np.empty((B, H), dtype=dt)
    hc_arr = np.empty((B, H), dtype=dt)
    cdef floating[:, ::1] ac = ac_arr, h = h_arr, hc = hc_arr
    cdef double m, hn
    with nogil:
        for n in range(B):
            m = mask[n]
            for k in range(H):
                hc[n, k] = <floating>tanh(a[n, 2 * H + k] + b[2 * H + k] + ac[n, k])
                hn = (1.0 - z[n, k]) * h_prev[n, k] + z[n, k] * hc[n, k]
                h[n, k] = <floating>(m * hn + (1.0 - m) * h_prev[n, k])
    return h_arr, (z_arr, r_arr, hc_arr, hd_arr, q_arr)


def gru_forward(h_prev, x, mask, W, U, b, rmask):
    return _gru_forward(h_prev, mask, b, rmask, x, W, U)


def _gru_backward(floating[:, ::1] gh, floating[:, ::1] h_prev, floating[::1] mask,
                  floating[:, ::1] rmask, floating[:, ::1] z, floating[:, ::1] r,
                  floating[:, ::1] hc, floating[:, ::1] hd, x, W, U, q):
    cdef Py_ssize_t B = h_prev.shape[0], H = h_prev.shape[1]
    cdef Py_ssize_t n, k
    dt = np.asarray(h_prev).dtype
    ghp_arr = np.empty((B, H), dtype=dt)
    ga_arr = np.empty((B, 3 * H), dtype=dt)
    cdef floating[:, ::1] ghp = ghp_arr, ga = ga_arr
    cdef double m, ghn
    with nogil:
        for n in range(B):
            m = mask[n]
            for k in range(H):
                ghn = m * gh[n, k]
                ghp[n, k] = <floating>((1.0 - m) * gh[n, k] + ghn * (1.0 - z[n, k]))
                ga[n, k] = <floating>(ghn * (hc[n, k] - h_prev[n, k]) * z[n, k] * (1.0 - z[n, k]))
                ga[n, 2 * H + k] = <floating>(ghn * z[n, k] * (1.0 - hc[n, k] * hc[n, k]))
    ga_h = ga_arr[:, 2 * H :]
    U_h = U[:, 2 * H :]
    gq_arr = np.dot(ga_h, U_h.T)
    ghd_arr = np.empty((B, H), dtype=dt)
    cdef floating[:, ::1] gq = gq_arr, ghd = ghd_arr
    with nogil:
        for n in range(B):
            for k in range(H):
                ga[n, H + k] = <floating>(gq[n, k] * hd[n, k] * r[n, k] * (1.0 - r[n, k]))
                ghd[n, k] = gq[n, k] * r[n, k]
    ga_zr = ga_arr[:, : 2 * H]
    ghd2_arr = np.dot(ga_zr, U[:, : 2 * H].T)
    cdef floating[:, ::1] ghd2 = ghd2_arr
    with nogil:
        for n in range(B):
            for k in range(H):
                ghp[n, k] += (ghd[n, k] + ghd2[n, k]) * rmask[n, k]
    gU = np.empty_like(U)
    gU[:, : 2 * H] = np.dot(np.asarray(hd).T, ga_zr)
    gU[:, 2 * H :] = np.dot(q.T, ga_h)
    return ghp_arr, np.dot(ga_arr, W.T), np.dot(x.T, ga_arr), gU, ga_arr.sum(axis=0)


def gru_backward(gh, h_prev, x, mask, W, U, rmask, cache):
    z, r, hc, hd, q = cache
    return _gru_backward(gh, h_prev, mask, rmask, z, r, hc, hd, x, W, U, q)


def _attention_scores(floating[:, :, ::1] t, floating[::1] va, floating[:, ::1] mask):
    cdef Py_ssize_t B = t.shape[0], N = t.shape[1], A = t.shape[2]
    cdef Py_ssize_t n, i, k
    dt = np.asarray(t).dtype
    alpha_arr = np.zeros((B, N), dtype=dt)
    e_arr = np.empty(N, dtype=np.float64)
    cdef floating[:, ::1] alpha = alpha_arr
    cdef double[::1] e = e_arr
    cdef double mx, s, acc
    cdef bint seen
    with nogil:
        for n in range(B):
            seen = False
            mx = 0.0
            for i in range(N):
                acc = 0.0
                for k in range(A):
                    acc += t[n, i, k] * va[k]
                e[i] = <floating>acc
                if mask[n, i] > 0 and (not seen or e[i] > mx):
                    mx = e[i]
                    seen = True
            s = 0.0
            for i in range(N):
                if mask[n, i] > 0:
                    e[i] = <floating>exp(<floating>(e[i] - mx))
                    s += e[i]
                else:
                    e[i] = 0.0
            for i in range(N):
                alpha[n, i] = <floating>(e[i] / s)
    return alpha_arr


def attention_forward(d, keys, Wa, va, hs, mask):
    # vectorized tanh beats a scalar libm loop by a wide margin
    t = np.tanh(keys + np.dot(d, Wa)[:, None, :])
    alpha = _attention_scores(t, va, mask)
    ctx = np.matmul(alpha[:, None, :], hs)[:, 0, :]
    return ctx, alpha, t


def _attention_backward(floating[:, ::1] galpha, floating[:, ::1] alpha,
                        floating[:, :, ::1] t, floating[::1] va):
    cdef Py_ssize_t B = t.shape[0], N = t.shape[1], A = t.shape[2]
    cdef Py_ssize_t n, i, k
    dt = np.asarray(t).dtype
    gkeys_arr = np.zeros((B, N, A), dtype=dt)
    gpre_arr = np.zeros((B, A), dtype=dt)
    gva_acc = np.zeros(A, dtype=np.float64)
    cdef floating[:, :, ::1] gkeys = gkeys_arr
    cdef floating[:, ::1] gpre = gpre_arr
    cdef double[::1] gva = gva_acc
    cdef double dot, ge
    cdef floating tv, g
    with nogil:
        for n in range(B):
            dot = 0.0
            for i in range(N):
                dot += alpha[n, i] * galpha[n, i]
            for i in range(N):
                ge = alpha[n, i] * (galpha[n, i] - dot)
                if ge == 0:
                    continue
                for k in range(A):
                    tv = t[n, i, k]
                    gva[k] += ge * tv
                    g = <floating>(ge * va[k] * (1.0 - tv * tv))
                    gkeys[n, i, k] = g
                    gpre[n, k] += g
    return gkeys_arr, gpre_arr, gva_acc.astype(dt)


def attention_backward(gctx, d, Wa, va, hs, alpha, t):
    galpha = np.matmul(hs, gctx[:, :, None])[:, :, 0]
    ghs = alpha[:, :, None] * gctx[:, None, :]
    gkeys, gpre, gva = _attention_backward(galpha, alpha, t, va)
    return np.dot(gpre, Wa.T), gkeys, np.dot(d.T, gpre), gva, ghs
