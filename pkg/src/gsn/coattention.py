"""BiDAF-style co-attention between a current node and one neighbor.

Given the current node C (T x D) and a neighbor S (L x D):

    M[l, t]  = w . [S_l ; C_t ; S_l * C_t] + bias                 (L x T)
    a_t      = softmax over l of M[:, t];   S~_t = sum_l a_t[l] S_l
    b        = softmax over t of max_l M[l, t];  C~_t = sum_k b_k C_k
    O~_t     = [C_t ; S~_t ; C_t * S~_t ; C_t * C~_t]               (T x 4D)
    O        = act(O~ Wo + bo)                                      (T x D)

The output keeps the current node's length whatever the neighbor's.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import (NumericError, ShapeError, Tensor, _record, add, add_row, concat_cols,
                     matmul, mul, reduce, repeat_rows, slice_cols, softmax_rows, transpose,
                     activate)

ACTIVATIONS = ("relu", "identity")


@dataclass
class CoattnParams:
    proj_i_w: Tensor  # 1 x 3D
    proj_i_b: Tensor  # 1 x 1
    proj_o_w: Tensor  # 4D x D
    proj_o_b: Tensor  # 1 x D
    activation: str = "relu"

    def __post_init__(self):
        D = self.dim
        if self.proj_i_w.shape != (1, 3 * D) or self.proj_i_b.shape != (1, 1):
            raise ShapeError(f"Proj_i must be 1x{3 * D} plus 1x1 bias")
        if self.proj_o_b.shape != (1, D):
            raise ShapeError(f"Proj_o bias must be 1x{D}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def dim(self) -> int:
        return self.proj_o_w.cols

    def tensors(self) -> dict[str, Tensor]:
        return {"proj_i_w": self.proj_i_w, "proj_i_b": self.proj_i_b,
                "proj_o_w": self.proj_o_w, "proj_o_b": self.proj_o_b}

    def weight_count(self) -> int:
        """Trainable weights, biases excluded: 3D for Proj_i plus 4D^2 for Proj_o."""
        return self.proj_i_w.data.size + self.proj_o_w.data.size

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, activation: str = "relu",
             requires_grad: bool = True) -> "CoattnParams":
        bi = np.sqrt(6.0 / (3 * dim + 1))
        bo = np.sqrt(6.0 / (4 * dim + dim))
        return cls(
            Tensor(rng.uniform(-bi, bi, (1, 3 * dim)), requires_grad),
            Tensor(np.zeros((1, 1)), requires_grad),
            Tensor(rng.uniform(-bo, bo, (4 * dim, dim)), requires_grad),
            Tensor(np.zeros((1, dim)), requires_grad),
            activation,
        )

    @classmethod
    def zeros(cls, dim: int, activation: str = "relu") -> "CoattnParams":
        return cls(Tensor(np.zeros((1, 3 * dim))), Tensor(np.zeros((1, 1))),
                   Tensor(np.zeros((4 * dim, dim))), Tensor(np.zeros((1, dim))), activation)


@dataclass
class CoattnTrace:
    M: np.ndarray        # L x T affinity
    a: np.ndarray        # T x L, row t is the neighbor-axis softmax of M[:, t]
    b: np.ndarray        # 1 x T
    tilde_S: np.ndarray  # T x D
    tilde_C: np.ndarray  # T x D, identical rows
    tilde_O: np.ndarray  # T x 4D
    O: np.ndarray        # T x D


def _check(C: Tensor, S: Tensor, p: CoattnParams) -> None:
    if C.cols != S.cols or C.cols != p.dim:
        raise ShapeError(f"co-attention: C {C.shape}, S {S.shape} and params dim {p.dim} disagree")


def _flat(p: CoattnParams):
    return (p.proj_i_w.data[0], float(p.proj_i_b.data[0, 0]), p.proj_o_w.data, p.proj_o_b.data[0])


def affinity(C: Tensor, S: Tensor, p: CoattnParams) -> Tensor:
    """The L x T affinity matrix, built from tensor primitives."""
    _check(C, S, p)
    D, T, L = p.dim, C.rows, S.rows
    w_s = slice_cols(p.proj_i_w, 0, D)
    w_c = slice_cols(p.proj_i_w, D, 2 * D)
    w_sc = slice_cols(p.proj_i_w, 2 * D, 3 * D)
    from_s = matmul(matmul(S, transpose(w_s)), Tensor(np.ones((1, T))))        # L x T
    from_c = matmul(Tensor(np.ones((L, 1))), transpose(matmul(C, transpose(w_c))))
    cross = matmul(mul(S, repeat_rows(w_sc, L)), transpose(C))
    bias = matmul(matmul(Tensor(np.ones((L, 1))), p.proj_i_b), Tensor(np.ones((1, T))))
    return add(add(add(from_s, from_c), cross), bias)


def coattn_forward_composed(C: Tensor, S: Tensor, p: CoattnParams) -> Tensor:
    """Reference path: the same computation as a chain of tape primitives."""
    M = affinity(C, S, p)
    T = C.rows
    a = softmax_rows(transpose(M))                            # T x L
    tilde_S = matmul(a, S)
    b = softmax_rows(reduce(M, "rows", "max"))                # 1 x T
    tilde_C = repeat_rows(matmul(b, C), T)
    tilde_O = concat_cols([C, tilde_S, mul(C, tilde_S), mul(C, tilde_C)])
    return activate(add_row(matmul(tilde_O, p.proj_o_w), p.proj_o_b), p.activation)


def coattn_forward(C: Tensor, S: Tensor, p: CoattnParams) -> tuple[Tensor, CoattnTrace]:
    """Fused co-attention; returns the output and the intermediate trace."""
    _check(C, S, p)
    wi, bi, Wo, bo = _flat(p)
    relu = p.activation == "relu"
    O, cache = kernels.coattn_forward(C.data, S.data, wi, bi, Wo, bo, relu)
    if not (np.all(np.isfinite(O)) and np.all(np.isfinite(cache[0]))):
        raise NumericError("co-attention produced non-finite values")
    M, A, St, midx, b, cvec, Ot, Z = cache
    trace = CoattnTrace(M=np.asarray(M), a=np.ascontiguousarray(np.asarray(A).T),
                        b=np.asarray(b).reshape(1, -1), tilde_S=np.asarray(St),
                        tilde_C=np.repeat(np.asarray(cvec).reshape(1, -1), C.rows, axis=0),
                        tilde_O=np.asarray(Ot), O=np.asarray(O))
    Cd, Sd = C.data, S.data

    def backward(g):
        gC, gS, gwi, gbi, gWo, gbo = kernels.coattn_backward(
            np.ascontiguousarray(g), Cd, Sd, wi, Wo, relu, cache)
        return (gC, gS, gwi.reshape(1, -1), np.array([[gbi]]), gWo, gbo.reshape(1, -1))

    out = _record("coattn", np.asarray(O), (C, S, p.proj_i_w, p.proj_i_b, p.proj_o_w, p.proj_o_b),
                  backward)
    return out, trace


def coattn_group(C: Tensor, neighbors: list[Tensor], p: CoattnParams, combiner: str) -> Tensor:
    """Co-attend C with every tensor in ``neighbors`` and combine element-wise.

    One fused kernel call; equivalent to ``combine([coattn(C, S) ...], combiner)``.
    """
    if combiner not in ("max", "mean"):
        raise ValueError(f"unknown combiner {combiner!r}")
    for S in neighbors:
        _check(C, S, p)
    wi, bi, Wo, bo = _flat(p)
    relu = p.activation == "relu"
    use_max = combiner == "max"
    S_all = np.concatenate([S.data for S in neighbors], axis=0) if len(neighbors) > 1 \
        else neighbors[0].data
    offsets = np.cumsum([0] + [S.rows for S in neighbors])
    S_all = np.ascontiguousarray(S_all)
    out, cache = kernels.group_forward(np.ascontiguousarray(C.data), S_all, offsets, wi, bi, Wo, bo, relu, use_max)
    if not (np.all(np.isfinite(out)) and np.isfinite(S_all.sum() + C.data.sum())):
        raise NumericError("co-attention produced non-finite values")
    Cd = np.ascontiguousarray(C.data)

    def backward(g):
        gC, gS, gwi, gbi, gWo, gbo = kernels.group_backward(
            np.ascontiguousarray(g), Cd, S_all, offsets, wi, Wo, relu, use_max, cache)
        gS_parts = [gS[offsets[k]:offsets[k + 1]] for k in range(len(neighbors))]
        return (gC, *gS_parts, gwi.reshape(1, -1), np.array([[gbi]]), gWo, gbo.reshape(1, -1))

    inputs = (C, *neighbors, p.proj_i_w, p.proj_i_b, p.proj_o_w, p.proj_o_b)
    return _record("coattn_group", np.asarray(out), inputs, backward)


# ------------------------------------------------------------------ heatmaps

def _softmax_cols(M: np.ndarray) -> np.ndarray:
    e = np.exp(M - M.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def export_heatmap(trace: CoattnTrace, normalize: str = "neighbor-axis",
                   current_tokens=None, neighbor_tokens=None) -> tuple[str, bytes]:
    """Render the affinity matrix as (CSV text, binary PGM bytes).

    CSV rows are neighbor tokens, columns are current-node tokens. With
    ``normalize="neighbor-axis"`` each column is softmaxed over the
    neighbor tokens. The PGM is L rows by T columns, min-max scaled.
    """
    M = np.asarray(trace.M, dtype=np.float64)
    L, T = M.shape
    if normalize == "neighbor-axis":
        vals = _softmax_cols(M)
    elif normalize == "none":
        vals = M
    else:
        raise ValueError("normalize must be 'neighbor-axis' or 'none'")
    cur = [str(t) for t in current_tokens] if current_tokens is not None else [f"c{t}" for t in range(T)]
    nbr = [str(t) for t in neighbor_tokens] if neighbor_tokens is not None else [f"n{l}" for l in range(L)]
    if len(cur) != T or len(nbr) != L:
        raise ShapeError(f"token labels ({len(nbr)}, {len(cur)}) do not match M {M.shape}")
    buf = io.StringIO()
    buf.write("," + ",".join(cur) + "\n")
    for l in range(L):
        buf.write(nbr[l] + "," + ",".join(f"{v:.6f}" for v in vals[l]) + "\n")
    lo, hi = vals.min(), vals.max()
    if hi > lo:
        pix = np.round((vals - lo) / (hi - lo) * 255.0)
    else:
        pix = np.zeros_like(vals)
    img = f"P5\n{T} {L}\n255\n".encode("ascii") + pix.astype(np.uint8).tobytes()
    return buf.getvalue(), img
