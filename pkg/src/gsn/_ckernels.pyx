# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled co-attention kernels; same contract as ``gsn._pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from libc.string cimport memset

cnp.import_array()

BACKEND = "cython"


cdef void _fwd(const double* C, const double* S, Py_ssize_t T, Py_ssize_t L, Py_ssize_t D,
               const double* wi, double bi, const double* Wo, const double* bo, bint relu,
               double* M, double* A, double* St, Py_ssize_t* midx, double* b,
               double* cvec, double* Ot, double* Z, double* O) noexcept nogil:
    cdef Py_ssize_t l, t, d, k, D4 = 4 * D
    cdef double acc, mx, tot, v, s1
    cdef const double* Sl
    cdef const double* Ct
    for l in range(L):
        Sl = S + l * D
        s1 = bi
        for d in range(D):
            s1 += Sl[d] * wi[d]
        for t in range(T):
            Ct = C + t * D
            acc = s1
            for d in range(D):
                acc += Ct[d] * (wi[D + d] + Sl[d] * wi[2 * D + d])
            M[l * T + t] = acc

    memset(St, 0, T * D * sizeof(double))
    for t in range(T):
        mx = M[t]
        k = 0
        for l in range(1, L):
            if M[l * T + t] > mx:
                mx = M[l * T + t]
                k = l
        midx[t] = k
        tot = 0.0
        for l in range(L):
            v = exp(M[l * T + t] - mx)
            A[l * T + t] = v
            tot += v
        for l in range(L):
            v = A[l * T + t] / tot
            A[l * T + t] = v
            for d in range(D):
                St[t * D + d] += v * S[l * D + d]

    mx = M[midx[0] * T]
    for t in range(1, T):
        if M[midx[t] * T + t] > mx:
            mx = M[midx[t] * T + t]
    tot = 0.0
    for t in range(T):
        v = exp(M[midx[t] * T + t] - mx)
        b[t] = v
        tot += v
    memset(cvec, 0, D * sizeof(double))
    for t in range(T):
        b[t] /= tot
        for d in range(D):
            cvec[d] += b[t] * C[t * D + d]

    for t in range(T):
        for d in range(D):
            v = C[t * D + d]
            Ot[t * D4 + d] = v
            Ot[t * D4 + D + d] = St[t * D + d]
            Ot[t * D4 + 2 * D + d] = v * St[t * D + d]
            Ot[t * D4 + 3 * D + d] = v * cvec[d]
        for d in range(D):
            Z[t * D + d] = bo[d]
        for k in range(D4):
            v = Ot[t * D4 + k]
            for d in range(D):
                Z[t * D + d] += v * Wo[k * D + d]
        for d in range(D):
            v = Z[t * D + d]
            O[t * D + d] = v if (not relu or v > 0.0) else 0.0


cdef void _bwd(const double* gO, const double* C, const double* S,
               Py_ssize_t T, Py_ssize_t L, Py_ssize_t D,
               const double* wi, const double* Wo, bint relu,
               const double* M, const double* A, const double* St, const Py_ssize_t* midx,
               const double* b, const double* cvec, const double* Ot, const double* Z,
               double* gC, double* gS, double* gwi, double* gbi, double* gWo, double* gbo,
               double* gZ, double* gOt, double* gSt, double* gM, double* gA,
               double* gcvec, double* gb, double* gs1, double* gc2) noexcept nogil:
    """Accumulates (+=) into gC, gS, gwi, gbi, gWo, gbo; the rest is scratch."""
    cdef Py_ssize_t l, t, d, k, D4 = 4 * D
    cdef double acc, v, bgb

    for t in range(T):
        for d in range(D):
            v = gO[t * D + d]
            if relu and Z[t * D + d] <= 0.0:
                v = 0.0
            gZ[t * D + d] = v
            gbo[d] += v
    for t in range(T):
        for k in range(D4):
            v = Ot[t * D4 + k]
            acc = 0.0
            for d in range(D):
                gWo[k * D + d] += v * gZ[t * D + d]
                acc += gZ[t * D + d] * Wo[k * D + d]
            gOt[t * D4 + k] = acc

    memset(gcvec, 0, D * sizeof(double))
    for t in range(T):
        for d in range(D):
            gC[t * D + d] += (gOt[t * D4 + d] + gOt[t * D4 + 2 * D + d] * St[t * D + d]
                              + gOt[t * D4 + 3 * D + d] * cvec[d])
            gSt[t * D + d] = gOt[t * D4 + D + d] + gOt[t * D4 + 2 * D + d] * C[t * D + d]
            gcvec[d] += gOt[t * D4 + 3 * D + d] * C[t * D + d]

    bgb = 0.0
    for t in range(T):
        acc = 0.0
        for d in range(D):
            gC[t * D + d] += b[t] * gcvec[d]
            acc += C[t * D + d] * gcvec[d]
        gb[t] = acc
        bgb += b[t] * acc
    memset(gM, 0, L * T * sizeof(double))
    for t in range(T):
        gM[midx[t] * T + t] += b[t] * (gb[t] - bgb)

    for l in range(L):
        for t in range(T):
            acc = 0.0
            for d in range(D):
                acc += S[l * D + d] * gSt[t * D + d]
            gA[l * T + t] = acc
            v = A[l * T + t]
            for d in range(D):
                gS[l * D + d] += v * gSt[t * D + d]
    for t in range(T):
        acc = 0.0
        for l in range(L):
            acc += A[l * T + t] * gA[l * T + t]
        for l in range(L):
            gM[l * T + t] += A[l * T + t] * (gA[l * T + t] - acc)

    memset(gc2, 0, T * sizeof(double))
    for l in range(L):
        acc = 0.0
        for t in range(T):
            v = gM[l * T + t]
            acc += v
            gc2[t] += v
        gs1[l] = acc
        gbi[0] += acc
    for l in range(L):
        for d in range(D):
            gS[l * D + d] += gs1[l] * wi[d]
            gwi[d] += S[l * D + d] * gs1[l]
    for t in range(T):
        for d in range(D):
            gC[t * D + d] += gc2[t] * wi[D + d]
            gwi[D + d] += C[t * D + d] * gc2[t]
    for l in range(L):
        for t in range(T):
            v = gM[l * T + t]
            for d in range(D):
                gS[l * D + d] += v * C[t * D + d] * wi[2 * D + d]
                gC[t * D + d] += v * S[l * D + d] * wi[2 * D + d]
                gwi[2 * D + d] += v * S[l * D + d] * C[t * D + d]


def group_forward(const double[:, ::1] C, const double[:, ::1] S, offsets,
                  const double[::1] wi, double bi, const double[:, ::1] Wo,
                  const double[::1] bo, bint relu, bint use_max):
    cdef Py_ssize_t T = C.shape[0], D = C.shape[1], n = len(offsets) - 1
    cdef Py_ssize_t LT = S.shape[0], k, t, d, L, off
    cdef Py_ssize_t[::1] offs = np.asarray(offsets, dtype=np.intp)
    M_ = np.empty(LT * T)
    A_ = np.empty(LT * T)
    St_ = np.empty((n, T, D))
    midx_ = np.empty((n, T), dtype=np.intp)
    b_ = np.empty((n, T))
    cvec_ = np.empty((n, D))
    Ot_ = np.empty((n, T, 4 * D))
    Z_ = np.empty((n, T, D))
    Ok_ = np.empty((n, T, D))
    out_ = np.empty((T, D))
    idx_ = np.zeros((T, D), dtype=np.intp)
    cdef double[::1] M = M_, A = A_
    cdef double[:, :, ::1] St = St_, Ot = Ot_, Z = Z_, Ok = Ok_
    cdef Py_ssize_t[:, ::1] midx = midx_, idx = idx_
    cdef double[:, ::1] b = b_, cvec = cvec_, out = out_
    cdef double v
    cdef Py_ssize_t j
    cdef double[::1] srt = np.empty(n)
    for k in range(n):
        off = offs[k]
        L = offs[k + 1] - off
        _fwd(&C[0, 0], &S[off, 0], T, L, D, &wi[0], bi, &Wo[0, 0], &bo[0], relu,
             &M[off * T], &A[off * T], &St[k, 0, 0], &midx[k, 0], &b[k, 0],
             &cvec[k, 0], &Ot[k, 0, 0], &Z[k, 0, 0], &Ok[k, 0, 0])
    for t in range(T):
        for d in range(D):
            v = Ok[0, t, d]
            if use_max:
                for k in range(1, n):
                    if Ok[k, t, d] > v:
                        v = Ok[k, t, d]
                        idx[t, d] = k
            else:
                # insertion sort, then sum: order-independent result
                for k in range(n):
                    v = Ok[k, t, d]
                    j = k
                    while j > 0 and srt[j - 1] > v:
                        srt[j] = srt[j - 1]
                        j -= 1
                    srt[j] = v
                v = srt[0]
                for k in range(1, n):
                    v += srt[k]
                v /= n
            out[t, d] = v
    return out_, (M_, A_, St_, midx_, b_, cvec_, Ot_, Z_, idx_)


def group_backward(const double[:, ::1] gO, const double[:, ::1] C, const double[:, ::1] S,
                   offsets, const double[::1] wi, const double[:, ::1] Wo, bint relu,
                   bint use_max, cache):
    M_, A_, St_, midx_, b_, cvec_, Ot_, Z_, idx_ = cache
    cdef const double[::1] M = M_, A = A_
    cdef const double[:, :, ::1] St = St_, Ot = Ot_, Z = Z_
    cdef const Py_ssize_t[:, ::1] midx = midx_, idx = idx_
    cdef const double[:, ::1] b = b_, cvec = cvec_
    cdef Py_ssize_t T = C.shape[0], D = C.shape[1], n = len(offsets) - 1
    cdef Py_ssize_t k, t, d, L, off, Lmax = 1
    cdef Py_ssize_t[::1] offs = np.asarray(offsets, dtype=np.intp)
    for k in range(n):
        if offs[k + 1] - offs[k] > Lmax:
            Lmax = offs[k + 1] - offs[k]
    gC_ = np.zeros((T, D))
    gS_ = np.zeros((S.shape[0], D))
    gwi_ = np.zeros(wi.shape[0])
    gWo_ = np.zeros((Wo.shape[0], D))
    gbo_ = np.zeros(D)
    gbi_ = np.zeros(1)
    cdef double[:, ::1] gC = gC_, gS = gS_, gWo = gWo_
    cdef double[::1] gwi = gwi_, gbo = gbo_, gbi = gbi_
    cdef double[:, ::1] gk = np.empty((T, D)), gZ = np.empty((T, D))
    cdef double[:, ::1] gOt = np.empty((T, 4 * D)), gSt = np.empty((T, D))
    cdef double[::1] gM = np.empty(Lmax * T), gA = np.empty(Lmax * T)
    cdef double[::1] gcvec = np.empty(D), gb = np.empty(T), gs1 = np.empty(Lmax), gc2 = np.empty(T)
    for k in range(n):
        for t in range(T):
            for d in range(D):
                if use_max:
                    gk[t, d] = gO[t, d] if idx[t, d] == k else 0.0
                else:
                    gk[t, d] = gO[t, d] / n
        off = offs[k]
        L = offs[k + 1] - off
        _bwd(&gk[0, 0], &C[0, 0], &S[off, 0], T, L, D, &wi[0], &Wo[0, 0], relu,
             &M[off * T], &A[off * T], &St[k, 0, 0], &midx[k, 0], &b[k, 0], &cvec[k, 0],
             &Ot[k, 0, 0], &Z[k, 0, 0],
             &gC[0, 0], &gS[off, 0], &gwi[0], &gbi[0], &gWo[0, 0], &gbo[0],
             &gZ[0, 0], &gOt[0, 0], &gSt[0, 0], &gM[0], &gA[0],
             &gcvec[0], &gb[0], &gs1[0], &gc2[0])
    return gC_, gS_, gwi_, gbi_[0], gWo_, gbo_


def coattn_forward(C, S, wi, bi, Wo, bo, relu):
    T, L = C.shape[0], S.shape[0]
    O, cache = group_forward(C, S, [0, L], wi, bi, Wo, bo, relu, False)
    M, A, St, midx, b, cvec, Ot, Z, _ = cache
    return O, (M.reshape(L, T), A.reshape(L, T), St[0], midx[0], b[0], cvec[0], Ot[0], Z[0])


def coattn_backward(gO, C, S, wi, Wo, relu, cache):
    M, A, St, midx, b, cvec, Ot, Z = cache
    T = C.shape[0]
    full = (M.ravel(), A.ravel(), St[None], midx[None], b[None], cvec[None], Ot[None], Z[None],
            np.zeros((T, C.shape[1]), dtype=np.intp))
    return group_backward(np.ascontiguousarray(gO), C, S, [0, S.shape[0]], wi, Wo, relu,
                          False, full)
