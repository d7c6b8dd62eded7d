# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled recurrent kernels: the LSTM time loop in C.

Behavioral twin of adatrig._kernels_py (same signatures, same array
contracts). The per-step matmuls go through BLAS and the gate math is fused
into one loop per step, which removes the per-step Python overhead that
dominates the pure-NumPy path at tagging-sized batches.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND = "cython"


cdef inline double sigm(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef void gemm_acc_h_wh(double* h_prev, double* w_h, double* out, int B, int H) noexcept nogil:
    # row-major: out(B,4H) += h_prev(B,H) @ w_h(H,4H)
    cdef char n = b'N'
    cdef int m = 4 * H, nn = B, k = H
    cdef int lda = 4 * H, ldb = H, ldc = 4 * H
    cdef double one = 1.0
    dgemm(&n, &n, &m, &nn, &k, &one, w_h, &lda, h_prev, &ldb, &one, out, &ldc)


cdef void gemm_acc_da_whT(double* da, double* w_h, double* out, int B, int H) noexcept nogil:
    # row-major: out(B,H) += da(B,4H) @ w_h(H,4H)^T
    cdef char t = b'T', n = b'N'
    cdef int m = H, nn = B, k = 4 * H
    cdef int lda = 4 * H, ldb = 4 * H, ldc = H
    cdef double one = 1.0
    dgemm(&t, &n, &m, &nn, &k, &one, w_h, &lda, da, &ldb, &one, out, &ldc)


cdef void gemm_acc_hT_da(double* h_prev, double* da, double* out, int B, int H) noexcept nogil:
    # row-major: out(H,4H) += h_prev(B,H)^T @ da(B,4H)
    cdef char n = b'N', t = b'T'
    cdef int m = 4 * H, nn = H, k = B
    cdef int lda = 4 * H, ldb = H, ldc = 4 * H
    cdef double one = 1.0
    dgemm(&n, &t, &m, &nn, &k, &one, da, &lda, h_prev, &ldb, &one, out, &ldc)


def lstm_forward(double[:, :, ::1] preact, double[:, ::1] w_h, double[:, ::1] mask):
    """See adatrig._kernels_py.lstm_forward."""
    cdef int T = preact.shape[0]
    cdef int B = preact.shape[1]
    cdef int H4 = preact.shape[2]
    cdef int H = H4 // 4

    y_arr = np.empty((T, B, H))
    hs_arr = np.empty((T, B, H))
    cs_arr = np.empty((T, B, H))
    gates_arr = np.empty((T, B, H4))
    tch_arr = np.empty((T, B, H))
    a_arr = np.empty((B, H4))
    h_arr = np.zeros((B, H))
    c_arr = np.zeros((B, H))

    cdef double[:, :, ::1] y = y_arr
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] cs = cs_arr
    cdef double[:, :, ::1] gates = gates_arr
    cdef double[:, :, ::1] tch = tch_arr
    cdef double[:, ::1] a = a_arr
    cdef double[:, ::1] h = h_arr
    cdef double[:, ::1] c = c_arr

    cdef int t, b, j
    cdef double i_g, f_g, g_g, o_g, c_hat, tc, h_hat, m
    with nogil:
        for t in range(T):
            for b in range(B):
                for j in range(H4):
                    a[b, j] = preact[t, b, j]
            gemm_acc_h_wh(&h[0, 0], &w_h[0, 0], &a[0, 0], B, H)
            for b in range(B):
                m = mask[t, b]
                for j in range(H):
                    i_g = sigm(a[b, j])
                    f_g = sigm(a[b, H + j])
                    g_g = tanh(a[b, 2 * H + j])
                    o_g = sigm(a[b, 3 * H + j])
                    c_hat = f_g * c[b, j] + i_g * g_g
                    tc = tanh(c_hat)
                    h_hat = o_g * tc
                    c[b, j] = m * c_hat + (1.0 - m) * c[b, j]
                    h[b, j] = m * h_hat + (1.0 - m) * h[b, j]
                    gates[t, b, j] = i_g
                    gates[t, b, H + j] = f_g
                    gates[t, b, 2 * H + j] = g_g
                    gates[t, b, 3 * H + j] = o_g
                    tch[t, b, j] = tc
                    cs[t, b, j] = c[b, j]
                    hs[t, b, j] = h[b, j]
                    y[t, b, j] = m * h_hat
    return y_arr, hs_arr, cs_arr, gates_arr, tch_arr


def lstm_backward(
    double[:, :, ::1] dy,
    double[:, ::1] w_h,
    double[:, ::1] mask,
    double[:, :, ::1] gates,
    double[:, :, ::1] tch,
    double[:, :, ::1] hs,
    double[:, :, ::1] cs,
):
    """See adatrig._kernels_py.lstm_backward."""
    cdef int T = dy.shape[0]
    cdef int B = dy.shape[1]
    cdef int H = dy.shape[2]

    dpre_arr = np.empty((T, B, 4 * H))
    dwh_arr = np.zeros((H, 4 * H))
    dH_arr = np.zeros((B, H))
    dC_arr = np.zeros((B, H))

    cdef double[:, :, ::1] dpre = dpre_arr
    cdef double[:, ::1] dwh = dwh_arr
    cdef double[:, ::1] dH = dH_arr
    cdef double[:, ::1] dC = dC_arr

    cdef int t, b, j
    cdef double m, i_g, f_g, g_g, o_g, tc, c_prev
    cdef double dh_hat, dc_hat, do_, di, df, dg
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                m = mask[t, b]
                for j in range(H):
                    i_g = gates[t, b, j]
                    f_g = gates[t, b, H + j]
                    g_g = gates[t, b, 2 * H + j]
                    o_g = gates[t, b, 3 * H + j]
                    tc = tch[t, b, j]
                    c_prev = cs[t - 1, b, j] if t > 0 else 0.0

                    dh_hat = m * (dy[t, b, j] + dH[b, j])
                    dc_hat = m * dC[b, j] + dh_hat * o_g * (1.0 - tc * tc)
                    do_ = dh_hat * tc
                    di = dc_hat * g_g
                    df = dc_hat * c_prev
                    dg = dc_hat * i_g
                    dC[b, j] = dc_hat * f_g + (1.0 - m) * dC[b, j]
                    dH[b, j] = (1.0 - m) * dH[b, j]

                    dpre[t, b, j] = di * i_g * (1.0 - i_g)
                    dpre[t, b, H + j] = df * f_g * (1.0 - f_g)
                    dpre[t, b, 2 * H + j] = dg * (1.0 - g_g * g_g)
                    dpre[t, b, 3 * H + j] = do_ * o_g * (1.0 - o_g)
            if t > 0:
                gemm_acc_hT_da(&hs[t - 1, 0, 0], &dpre[t, 0, 0], &dwh[0, 0], B, H)
            gemm_acc_da_whT(&dpre[t, 0, 0], &w_h[0, 0], &dH[0, 0], B, H)
    return dpre_arr, dwh_arr
