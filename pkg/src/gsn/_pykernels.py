"""Pure numpy co-attention kernels (fallback when the compiled core is absent).

Shapes: C is T x D (current node), S is L x D (neighbor), wi has 3D entries
laid out as [w_s; w_c; w_sc], Wo is 4D x D. The group kernels run one
co-attention per neighbor block of a row-stacked S (block k spans rows
offsets[k]:offsets[k+1]) and combine the outputs element-wise.
"""
import numpy as np

BACKEND = "python"


def coattn_forward(C, S, wi, bi, Wo, bo, relu):
    D = C.shape[1]
    w_s, w_c, w_sc = wi[:D], wi[D:2 * D], wi[2 * D:]
    # M[l, t] = S_l.w_s + C_t.w_c + (S_l * C_t).w_sc + bi
    M = (S @ w_s)[:, None] + (C @ w_c)[None, :] + (S * w_sc) @ C.T + bi
    E = np.exp(M - M.max(axis=0, keepdims=True))
    A = E / E.sum(axis=0, keepdims=True)          # column softmax, L x T
    St = A.T @ S                                   # T x D
    midx = M.argmax(axis=0)                        # first max over neighbor tokens
    m = M[midx, np.arange(M.shape[1])]
    e = np.exp(m - m.max())
    b = e / e.sum()
    cvec = b @ C                                   # D
    Ot = np.concatenate([C, St, C * St, C * cvec], axis=1)
    Z = Ot @ Wo + bo
    O = np.maximum(Z, 0.0) if relu else Z.copy()
    return O, (M, A, St, midx, b, cvec, Ot, Z)


def coattn_backward(gO, C, S, wi, Wo, relu, cache):
    M, A, St, midx, b, cvec, Ot, Z = cache
    D = C.shape[1]
    w_s, w_c, w_sc = wi[:D], wi[D:2 * D], wi[2 * D:]
    gZ = gO * (Z > 0) if relu else gO
    gWo = Ot.T @ gZ
    gbo = gZ.sum(axis=0)
    gOt = gZ @ Wo.T
    g1, g2, g3, g4 = gOt[:, :D], gOt[:, D:2 * D], gOt[:, 2 * D:3 * D], gOt[:, 3 * D:]
    gC = g1 + g3 * St + g4 * cvec
    gSt = g2 + g3 * C
    gcvec = (g4 * C).sum(axis=0)
    gC += np.outer(b, gcvec)
    gb = C @ gcvec
    gm = b * (gb - b @ gb)
    gM = np.zeros_like(M)
    gM[midx, np.arange(M.shape[1])] += gm
    gA = S @ gSt.T                                 # L x T
    gS = A @ gSt
    gM += A * (gA - (A * gA).sum(axis=0, keepdims=True))
    gs1 = gM.sum(axis=1)
    gc2 = gM.sum(axis=0)
    gbi = gM.sum()
    gMC = gM @ C
    gS += np.outer(gs1, w_s) + gMC * w_sc
    gC += np.outer(gc2, w_c) + (gM.T @ S) * w_sc
    gwi = np.concatenate([S.T @ gs1, C.T @ gc2, (S * gMC).sum(axis=0)])
    return gC, gS, gwi, gbi, gWo, gbo


def group_forward(C, S, offsets, wi, bi, Wo, bo, relu, use_max):
    outs, caches = [], []
    for k in range(len(offsets) - 1):
        O, cache = coattn_forward(C, S[offsets[k]:offsets[k + 1]], wi, bi, Wo, bo, relu)
        outs.append(O)
        caches.append(cache)
    if use_max:
        stack = np.stack(outs)
        idx = stack.argmax(axis=0)
        out = np.take_along_axis(stack, idx[None], axis=0)[0]
    else:
        # summing in sorted order makes the result independent of neighbor labels
        idx = None
        ordered = np.sort(np.stack(outs), axis=0)
        out = ordered[0].copy()
        for O in ordered[1:]:
            out += O
        out /= len(outs)
    return out, (caches, idx)


def group_backward(gO, C, S, offsets, wi, Wo, relu, use_max, cache):
    caches, idx = cache
    n = len(caches)
    gC = np.zeros_like(C)
    gS = np.zeros_like(S)
    gwi = np.zeros_like(wi)
    gbi = 0.0
    gWo = np.zeros_like(Wo)
    gbo = np.zeros(Wo.shape[1])
    for k in range(n):
        gk = np.where(idx == k, gO, 0.0) if use_max else gO / n
        lo, hi = offsets[k], offsets[k + 1]
        c, s, w, bb, wo, bo = coattn_backward(gk, C, S[lo:hi], wi, Wo, relu, caches[k])
        gC += c
        gS[lo:hi] += s
        gwi += w
        gbi += bb
        gWo += wo
        gbo += bo
    return gC, gS, gwi, gbi, gWo, gbo
