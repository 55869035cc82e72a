# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Typed-loop implementation of the sequence kernels.

Semantics are defined by deidseq.kernels.reference; this module exists
because the LSTM recurrence and the CRF dynamic programs dominate training
time and per-timestep numpy dispatch is pure overhead at those sizes.
Batched projections stay in BLAS (gemm via numpy, gemv via scipy's
cython_blas); gate math and the DP recursions run as C loops.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void _proj_fwd(double[:, ::1] whh, double* h_prev, int ldb, double* out, int B) nogil:
    # out(B, 4H) = h_prev(B, H) @ whh.T for row-major whh (4H, H).
    # Column-major view: out^T(4H, B) = whh(4H, H) @ h_prev^T(H, B).
    cdef int fourH = whh.shape[0]
    cdef int H = whh.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("t", "n", &fourH, &B, &H, &one, &whh[0, 0], &H, h_prev, &ldb, &zero, out, &fourH)


cdef inline void _proj_bwd(double[:, ::1] whh, double* da_t, int ldb, double* out, int B) nogil:
    # out(B, H) = da_t(B, 4H) @ whh for row-major whh (4H, H).
    # Column-major view: out^T(H, B) = whh^T(H, 4H) @ da_t^T(4H, B).
    cdef int fourH = whh.shape[0]
    cdef int H = whh.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("n", "n", &H, &B, &fourH, &one, &whh[0, 0], &H, da_t, &ldb, &zero, out, &H)


def lstm_forward(x, lengths, w_ih, w_hh, b):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w_ih = np.ascontiguousarray(w_ih, dtype=np.float64)
    w_hh = np.ascontiguousarray(w_hh, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    cdef cnp.intp_t B = x.shape[0]
    cdef cnp.intp_t T = x.shape[1]
    cdef cnp.intp_t H = w_hh.shape[1]
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)

    h_arr = np.zeros((B, T, H))
    c_arr = np.zeros((B, T, H))
    g_arr = np.zeros((B, T, 4 * H))
    # One GEMM for the input projection of every timestep.
    xw_arr = np.ascontiguousarray(x.reshape(B * T, -1) @ w_ih.T + b).reshape(B, T, 4 * H)

    cdef double[:, :, ::1] h = h_arr
    cdef double[:, :, ::1] c = c_arr
    cdef double[:, :, ::1] g = g_arr
    cdef double[:, :, ::1] xw = xw_arr
    cdef double[:, ::1] whh = w_hh
    cdef long[::1] lens = lengths
    # One recurrent GEMM per timestep over the whole batch: the weight
    # matrix streams through cache once per step instead of once per row.
    # rec stays zero at t=0; zero_c stands in for c[t-1].
    cdef double[:, ::1] rec = np.zeros((B, 4 * H))
    cdef double[::1] zero_c = np.zeros(H)
    cdef cnp.intp_t bi, t, j
    cdef double ct
    cdef double *pa
    cdef double *pg
    cdef double *pc
    cdef double *ph
    cdef double *pcp

    with nogil:
        for t in range(T):
            if t > 0:
                _proj_fwd(whh, &h[0, t - 1, 0], <int> (T * H), &rec[0, 0], <int> B)
            for bi in range(B):
                if t >= lens[bi]:
                    continue
                pa = &xw[bi, t, 0]
                pg = &g[bi, t, 0]
                pc = &c[bi, t, 0]
                ph = &h[bi, t, 0]
                pcp = &c[bi, t - 1, 0] if t > 0 else &zero_c[0]
                # contiguous per-gate loops so the compiler can vectorize exp/tanh
                for j in range(H):
                    pa[j] += rec[bi, j]
                    pg[j] = 1.0 / (1.0 + exp(-pa[j]))
                for j in range(H):
                    pa[H + j] += rec[bi, H + j]
                    pg[H + j] = 1.0 / (1.0 + exp(-pa[H + j]))
                for j in range(H):
                    pa[2 * H + j] += rec[bi, 2 * H + j]
                    pg[2 * H + j] = tanh(pa[2 * H + j])
                for j in range(H):
                    pa[3 * H + j] += rec[bi, 3 * H + j]
                    pg[3 * H + j] = 1.0 / (1.0 + exp(-pa[3 * H + j]))
                for j in range(H):
                    ct = pg[H + j] * pcp[j] + pg[j] * pg[2 * H + j]
                    pc[j] = ct
                    ph[j] = pg[3 * H + j] * tanh(ct)
    return h_arr, c_arr, g_arr


def lstm_backward(x, lengths, w_ih, w_hh, h, c, gates, dh_out):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w_ih = np.ascontiguousarray(w_ih, dtype=np.float64)
    w_hh = np.ascontiguousarray(w_hh, dtype=np.float64)
    dh_out = np.ascontiguousarray(dh_out, dtype=np.float64)
    cdef cnp.intp_t B = x.shape[0]
    cdef cnp.intp_t T = x.shape[1]
    cdef cnp.intp_t H = w_hh.shape[1]
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)

    da_arr = np.zeros((B, T, 4 * H))
    cdef double[:, :, ::1] da = da_arr
    cdef double[:, :, ::1] cm = np.ascontiguousarray(c, dtype=np.float64)
    cdef double[:, :, ::1] gm = np.ascontiguousarray(gates, dtype=np.float64)
    cdef double[:, :, ::1] dhm = dh_out
    cdef double[:, ::1] whh = w_hh
    cdef long[::1] lens = lengths
    cdef double[:, ::1] dh_rec = np.zeros((B, H))
    cdef double[:, ::1] dc_rec = np.zeros((B, H))
    cdef double[::1] zero_c = np.zeros(H)
    cdef cnp.intp_t bi, t, j
    cdef double tc, dh_j, dcj
    cdef double *pg
    cdef double *pda
    cdef double *pcell
    cdef double *pcp
    cdef double *pdh
    cdef double *pdr
    cdef double *pdc

    with nogil:
        for t in range(T - 1, -1, -1):
            for bi in range(B):
                if t >= lens[bi]:
                    continue
                pg = &gm[bi, t, 0]
                pda = &da[bi, t, 0]
                pcell = &cm[bi, t, 0]
                pcp = &cm[bi, t - 1, 0] if t > 0 else &zero_c[0]
                pdh = &dhm[bi, t, 0]
                pdr = &dh_rec[bi, 0]
                pdc = &dc_rec[bi, 0]
                for j in range(H):
                    tc = tanh(pcell[j])
                    dh_j = pdh[j] + pdr[j]
                    dcj = pdc[j] + dh_j * pg[3 * H + j] * (1.0 - tc * tc)
                    pda[j] = dcj * pg[2 * H + j] * pg[j] * (1.0 - pg[j])
                    pda[H + j] = dcj * pcp[j] * pg[H + j] * (1.0 - pg[H + j])
                    pda[2 * H + j] = dcj * pg[j] * (1.0 - pg[2 * H + j] * pg[2 * H + j])
                    pda[3 * H + j] = dh_j * tc * pg[3 * H + j] * (1.0 - pg[3 * H + j])
                    pdc[j] = dcj * pg[H + j]
            # dh_{t-1}(B, H) = da_t(B, 4H) @ w_hh in one GEMM; rows of
            # finished sequences have zero da and contribute nothing.
            if t > 0:
                _proj_bwd(whh, &da[0, t, 0], <int> (T * 4 * H), &dh_rec[0, 0], <int> B)
    h_prev = np.concatenate([np.zeros((B, 1, H)), np.asarray(h)[:, :-1]], axis=1)
    da_flat = da_arr.reshape(B * T, 4 * H)
    dx = (da_flat @ w_ih).reshape(B, T, -1)
    dw_ih = da_flat.T @ x.reshape(B * T, -1)
    dw_hh = da_flat.T @ h_prev.reshape(B * T, H)
    db = da_flat.sum(axis=0)
    return dx, dw_ih, dw_hh, db


cdef double _lse_row(double* v, cnp.intp_t n) nogil:
    cdef double m = v[0]
    cdef double s = 0.0
    cdef cnp.intp_t i
    for i in range(1, n):
        if v[i] > m:
            m = v[i]
    for i in range(n):
        s += exp(v[i] - m)
    return m + log(s)


def crf_forward(emissions, transitions):
    em = np.ascontiguousarray(emissions, dtype=np.float64)
    tr = np.ascontiguousarray(transitions, dtype=np.float64)
    cdef cnp.intp_t T = em.shape[0]
    cdef cnp.intp_t L = em.shape[1]
    alpha_arr = np.empty((T, L))
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] e = em
    cdef double[:, ::1] tm = tr
    cdef double[::1] work = np.empty(L)
    cdef cnp.intp_t t, i, j
    cdef double log_z

    for j in range(L):
        alpha[0, j] = e[0, j] + tm[L, j]
    for t in range(1, T):
        for j in range(L):
            for i in range(L):
                work[i] = alpha[t - 1, i] + tm[i, j]
            alpha[t, j] = e[t, j] + _lse_row(&work[0], L)
    for j in range(L):
        work[j] = alpha[T - 1, j] + tm[j, L + 1]
    log_z = _lse_row(&work[0], L)
    return float(log_z), alpha_arr


def crf_backward(emissions, transitions, alpha, log_z):
    em = np.ascontiguousarray(emissions, dtype=np.float64)
    tr = np.ascontiguousarray(transitions, dtype=np.float64)
    al = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef cnp.intp_t T = em.shape[0]
    cdef cnp.intp_t L = em.shape[1]
    beta_arr = np.empty((T, L))
    d_em_arr = np.empty((T, L))
    d_tr_arr = np.zeros((L + 2, L + 2))
    cdef double[:, ::1] beta = beta_arr
    cdef double[:, ::1] d_em = d_em_arr
    cdef double[:, ::1] d_tr = d_tr_arr
    cdef double[:, ::1] e = em
    cdef double[:, ::1] tm = tr
    cdef double[:, ::1] a = al
    cdef double[::1] work = np.empty(L)
    cdef cnp.intp_t t, i, j
    cdef double lz = log_z

    for j in range(L):
        beta[T - 1, j] = tm[j, L + 1]
    for t in range(T - 2, -1, -1):
        for i in range(L):
            for j in range(L):
                work[j] = tm[i, j] + e[t + 1, j] + beta[t + 1, j]
            beta[t, i] = _lse_row(&work[0], L)
    for t in range(T):
        for j in range(L):
            d_em[t, j] = exp(a[t, j] + beta[t, j] - lz)
    for t in range(T - 1):
        for i in range(L):
            for j in range(L):
                d_tr[i, j] += exp(a[t, i] + tm[i, j] + e[t + 1, j] + beta[t + 1, j] - lz)
    for j in range(L):
        d_tr[L, j] = d_em[0, j]
        d_tr[j, L + 1] = d_em[T - 1, j]
    return d_em_arr, d_tr_arr


def viterbi(emissions, transitions):
    em = np.ascontiguousarray(emissions, dtype=np.float64)
    tr = np.ascontiguousarray(transitions, dtype=np.float64)
    cdef cnp.intp_t T = em.shape[0]
    cdef cnp.intp_t L = em.shape[1]
    bp_arr = np.zeros((T, L), dtype=np.int64)
    path_arr = np.empty(T, dtype=np.int64)
    cdef long[:, ::1] bp = bp_arr
    cdef long[::1] path = path_arr
    cdef double[:, ::1] e = em
    cdef double[:, ::1] tm = tr
    cdef double[::1] score = np.empty(L)
    cdef double[::1] nxt = np.empty(L)
    cdef cnp.intp_t t, i, j, best
    cdef double v, m

    for j in range(L):
        score[j] = e[0, j] + tm[L, j]
    for t in range(1, T):
        for j in range(L):
            best = 0
            m = score[0] + tm[0, j]
            for i in range(1, L):
                v = score[i] + tm[i, j]
                if v > m:  # strict: ties keep the lowest index
                    m = v
                    best = i
            bp[t, j] = best
            nxt[j] = m + e[t, j]
        for j in range(L):
            score[j] = nxt[j]
    best = 0
    m = score[0] + tm[0, L + 1]
    for j in range(1, L):
        v = score[j] + tm[j, L + 1]
        if v > m:
            m = v
            best = j
    path[T - 1] = best
    for t in range(T - 1, 0, -1):
        path[t - 1] = bp[t, path[t]]
    return path_arr, float(m)
