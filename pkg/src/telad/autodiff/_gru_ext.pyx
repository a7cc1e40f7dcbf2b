# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GRU sequence kernels.

Same contract as :mod:`telad.autodiff._gru_py`; the per-step hidden-side
matmul goes through BLAS ``dgemm`` and the gate arithmetic is fused into a
single C loop, which removes the per-step numpy dispatch that dominates
small-hidden recurrences.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sig(double x) nogil:
    return 1.0 / (1.0 + exp(-x))


cdef inline double _tanh(double x) nogil:
    # exp-based; libm tanh is several times slower per call and does not vectorize
    if x > 20.0:
        return 1.0
    if x < -20.0:
        return -1.0
    return 1.0 - 2.0 / (exp(2.0 * x) + 1.0)


cdef void _mm(double* A, int lda, double* B, int ldb, double* C, int ldc,
              int m, int n, int k, double beta, bint trans_b) nogil:
    # row-major C(m,n) = A(m,k) @ op(B) + beta*C, op(B) = B (k,n) or B.T with B (n,k)
    cdef char ta = b'T' if trans_b else b'N'
    cdef char tb = b'N'
    cdef double alpha = 1.0
    dgemm(&ta, &tb, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef void _gates(const double* gx, const double* gh, const double* bh, const double* bx,
                 const double* hprev, double* h, double* rc, double* zc, double* nc,
                 double* gc, int H) nogil:
    # one batch row: gx/gh hold [r | z | n] pre-activations (gh without bias, bx pre-zeroed if unused)
    cdef int j
    for j in range(H):
        rc[j] = _sig(gx[j] + bx[j] + gh[j] + bh[j])
    for j in range(H):
        zc[j] = _sig(gx[H + j] + bx[H + j] + gh[H + j] + bh[H + j])
    for j in range(H):
        gc[j] = gh[2 * H + j] + bh[2 * H + j]
    for j in range(H):
        nc[j] = _tanh(gx[2 * H + j] + bx[2 * H + j] + rc[j] * gc[j])
    for j in range(H):
        h[j] = (1.0 - zc[j]) * nc[j] + zc[j] * hprev[j]


cdef void _gates_back(const double* dhs, const double* dhn, const double* rc, const double* zc,
                      const double* nc, const double* gc, const double* hprev, double* dgx,
                      double* dgh, double* dcur, int H) nogil:
    cdef int j
    cdef double dh, r, z, n, dn_pre, dz_pre, dr_pre
    for j in range(H):
        dh = dhs[j] + dhn[j]
        r = rc[j]
        z = zc[j]
        n = nc[j]
        dn_pre = dh * (1.0 - z) * (1.0 - n * n)
        dz_pre = dh * (hprev[j] - n) * z * (1.0 - z)
        dr_pre = dn_pre * gc[j] * r * (1.0 - r)
        dgx[j] = dr_pre
        dgx[H + j] = dz_pre
        dgx[2 * H + j] = dn_pre
        dgh[j] = dr_pre
        dgh[H + j] = dz_pre
        dgh[2 * H + j] = dn_pre * r
        dcur[j] = dh * z


def gru_forward(xp, h0, w_h, b_h, w_x=None, b_x=None, int steps=0):
    cdef bint autonomous = xp is None
    cdef double[:, ::1] h0v = np.ascontiguousarray(h0, dtype=np.float64)
    cdef int B = h0v.shape[0]
    cdef int H = h0v.shape[1]
    cdef int T = steps if autonomous else xp.shape[0]
    cdef int H3 = 3 * H
    cdef int H6 = 6 * H
    cdef double[:, ::1] whv = np.ascontiguousarray(w_h, dtype=np.float64)
    cdef double[::1] bhv = np.ascontiguousarray(b_h, dtype=np.float64)
    cdef double[:, :, ::1] xpv
    cdef double[:, ::1] wcat
    cdef double[::1] bxv = np.zeros(3 * H)
    cdef int G = H6 if autonomous else H3
    if autonomous:
        wcat = np.ascontiguousarray(np.concatenate([w_x, w_h], axis=1), dtype=np.float64)
        bxv = np.ascontiguousarray(b_x, dtype=np.float64)
    else:
        xpv = np.ascontiguousarray(xp, dtype=np.float64)
        wcat = whv

    hs_a = np.empty((T, B, H))
    r_a = np.empty((T, B, H))
    z_a = np.empty((T, B, H))
    n_a = np.empty((T, B, H))
    g_a = np.empty((T, B, H))
    cdef double[:, :, ::1] hs = hs_a
    cdef double[:, :, ::1] rc = r_a
    cdef double[:, :, ::1] zc = z_a
    cdef double[:, :, ::1] nc = n_a
    cdef double[:, :, ::1] gc = g_a
    cdef double[:, ::1] gbuf = np.empty((B, G))
    cdef double* hprev
    cdef double* gx
    cdef int t, b

    with nogil:
        for t in range(T):
            hprev = &h0v[0, 0] if t == 0 else &hs[t - 1, 0, 0]
            _mm(hprev, H, &wcat[0, 0], G, &gbuf[0, 0], G, B, G, H, 0.0, False)
            for b in range(B):
                gx = &gbuf[b, 0] if autonomous else &xpv[t, b, 0]
                _gates(gx, &gbuf[b, G - H3], &bhv[0], &bxv[0],
                       hprev + b * H, &hs[t, b, 0], &rc[t, b, 0], &zc[t, b, 0],
                       &nc[t, b, 0], &gc[t, b, 0], H)
    return hs_a, (r_a, z_a, n_a, g_a)


def gru_backward(dhs, cache, h0, hs, w_h, w_x=None):
    cdef bint autonomous = w_x is not None
    cdef double[:, :, ::1] dhsv = np.ascontiguousarray(dhs, dtype=np.float64)
    cdef double[:, :, ::1] rc = cache[0]
    cdef double[:, :, ::1] zc = cache[1]
    cdef double[:, :, ::1] nc = cache[2]
    cdef double[:, :, ::1] gc = cache[3]
    cdef double[:, ::1] h0v = np.ascontiguousarray(h0, dtype=np.float64)
    cdef double[:, :, ::1] hsv = hs
    cdef int T = hsv.shape[0]
    cdef int B = hsv.shape[1]
    cdef int H = hsv.shape[2]
    cdef int H3 = 3 * H
    cdef double[:, ::1] whv = np.ascontiguousarray(w_h, dtype=np.float64)
    cdef double[:, ::1] wxv
    if autonomous:
        wxv = np.ascontiguousarray(w_x, dtype=np.float64)

    dgx_a = np.empty((T, B, H3))
    dgh_a = np.empty((T, B, H3))
    dh_a = np.zeros((B, H))
    cdef double[:, :, ::1] dgx = dgx_a
    cdef double[:, :, ::1] dgh = dgh_a
    cdef double[:, ::1] dhn = dh_a
    cdef double[:, ::1] dcur = np.empty((B, H))
    cdef double* hprev
    cdef int t, b, j

    with nogil:
        for t in range(T - 1, -1, -1):
            hprev = &h0v[0, 0] if t == 0 else &hsv[t - 1, 0, 0]
            for b in range(B):
                _gates_back(&dhsv[t, b, 0], &dhn[b, 0], &rc[t, b, 0], &zc[t, b, 0], &nc[t, b, 0],
                            &gc[t, b, 0], hprev + b * H, &dgx[t, b, 0], &dgh[t, b, 0],
                            &dcur[b, 0], H)
            _mm(&dgh[t, 0, 0], H3, &whv[0, 0], H3, &dcur[0, 0], H, B, H, H3, 1.0, True)
            if autonomous:
                _mm(&dgx[t, 0, 0], H3, &wxv[0, 0], H3, &dcur[0, 0], H, B, H, H3, 1.0, True)
            for b in range(B):
                for j in range(H):
                    dhn[b, j] = dcur[b, j]
    return dgx_a, dgh_a, dh_a
