"""GSN message passing, node summarization, and the early-summarization GCN baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coattention import CoattnParams, coattn_group
from .graph import RelationalGraph
from .tensor import (Tensor, _record, activate, add_row, combine, concat_rows, matmul, reduce,
                     slice_rows, softmax_rows, tanh, transpose)

COMBINERS = ("max", "mean")


class ConfigError(ValueError):
    pass


@dataclass
class GsnLayerParams:
    coattn: list[CoattnParams]  # one per relation
    combiner: str = "max"

    def __post_init__(self):
        if self.combiner not in COMBINERS:
            raise ConfigError(f"combiner must be one of {COMBINERS}, got {self.combiner!r}")
        if not self.coattn:
            raise ConfigError("a GSN layer needs at least one relation")

    @property
    def num_relations(self) -> int:
        return len(self.coattn)

    def weight_count(self) -> int:
        return sum(p.weight_count() for p in self.coattn)

    @classmethod
    def init(cls, dim: int, relations: int, rng: np.random.Generator,
             combiner: str = "max", activation: str = "relu") -> "GsnLayerParams":
        return cls([CoattnParams.init(dim, rng, activation) for _ in range(relations)], combiner)


def _check_relations(g: RelationalGraph, n: int) -> None:
    if g.num_relations != n:
        raise ConfigError(f"layer has {n} relation(s) but the graph has {g.num_relations}")


def gsn_layer_forward(g: RelationalGraph, states: list[Tensor], p: GsnLayerParams) -> list[Tensor]:
    """One hop: per relation, co-attend each node with N^r(i) and itself,
    combine element-wise, then average the relation results."""
    _check_relations(g, p.num_relations)
    if len(states) != g.num_nodes:
        raise ConfigError(f"{len(states)} states for {g.num_nodes} nodes")
    per_rel = [g.neighbors(r) for r in range(p.num_relations)]
    out = []
    for i, C in enumerate(states):
        rel_outs = []
        for r, params in enumerate(p.coattn):
            group = sorted(per_rel[r][i] + [i])
            rel_outs.append(coattn_group(C, [states[j] for j in group], params, p.combiner))
        out.append(combine(rel_outs, "mean"))
    return out


def gsn_stack_forward(g: RelationalGraph, states: list[Tensor],
                      layers: list[GsnLayerParams]) -> tuple[list[Tensor], list[list[Tensor]]]:
    """Apply layers in order; returns (final states, per-layer outputs)."""
    if not layers:
        raise ConfigError("a GSN stack needs at least one layer")
    history = []
    for p in layers:
        states = gsn_layer_forward(g, states, p)
        history.append(states)
    return states, history


# ------------------------------------------------------------ summarization

@dataclass
class AttentivePoolParams:
    """Scores ``tanh(V W) u`` softmaxed over rows; zero ``u`` gives mean pooling."""

    W: Tensor  # D x D
    u: Tensor  # D x 1

    def tensors(self) -> dict[str, Tensor]:
        return {"W": self.W, "u": self.u}

    def weight_count(self) -> int:
        return self.W.data.size + self.u.data.size

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "AttentivePoolParams":
        bw = np.sqrt(6.0 / (2 * dim))
        bu = np.sqrt(6.0 / (dim + 1))
        return cls(Tensor(rng.uniform(-bw, bw, (dim, dim)), True),
                   Tensor(rng.uniform(-bu, bu, (dim, 1)), True))


def attentive_pool(V: Tensor, p: AttentivePoolParams) -> Tensor:
    scores = transpose(matmul(tanh(matmul(V, p.W)), p.u))   # 1 x T
    return matmul(softmax_rows(scores), V)


def summarize_node(V: Tensor, method: str = "attentive", params: AttentivePoolParams | None = None) -> Tensor:
    if method == "mean":
        return reduce(V, "rows", "mean")
    if method == "max":
        return reduce(V, "rows", "max")
    if method == "attentive":
        if params is None:
            raise ConfigError("attentive pooling needs parameters")
        return attentive_pool(V, params)
    raise ConfigError(f"unknown summarizer {method!r}")


# --------------------------------------------------------------------- GCN

@dataclass
class GcnLayerParams:
    proj_w: list[Tensor]  # one square matrix per relation
    proj_b: list[Tensor]
    activation: str = "relu"
    self_inclusive: bool = True

    def __post_init__(self):
        for w in self.proj_w:
            if w.rows != w.cols:
                raise ConfigError(f"GCN projection must be square, got {w.shape}")
        if len(self.proj_w) != len(self.proj_b):
            raise ConfigError("one bias per relation projection")

    @property
    def num_relations(self) -> int:
        return len(self.proj_w)

    def weight_count(self) -> int:
        return sum(w.data.size for w in self.proj_w)

    @classmethod
    def init(cls, dim: int, relations: int, rng: np.random.Generator,
             activation: str = "relu", self_inclusive: bool = True) -> "GcnLayerParams":
        bound = np.sqrt(6.0 / (2 * dim))
        return cls([Tensor(rng.uniform(-bound, bound, (dim, dim)), True) for _ in range(relations)],
                   [Tensor(np.zeros((1, dim)), True) for _ in range(relations)],
                   activation, self_inclusive)


def propagation_matrix(g: RelationalGraph, r: int, self_inclusive: bool = True) -> np.ndarray:
    """Row i averages node i and its relation-r neighbors.

    ``self_inclusive`` divides by |N(i) + i|; otherwise by the degree
    |N(i)| (floored at 1 so isolated nodes keep their own vector).
    """
    n = g.num_nodes
    P = np.zeros((n, n))
    for i, nb in enumerate(g.neighbors(r)):
        members = nb + [i]
        denom = len(members) if self_inclusive else max(len(nb), 1)
        P[i, members] = 1.0 / denom
    return P


def neighborhood_mean(g: RelationalGraph, r: int, X: Tensor, self_inclusive: bool = True) -> Tensor:
    """``propagation_matrix(g, r) @ X``, evaluated as x_i + sum_j (x_j - x_i) / n
    in the self-inclusive case so a constant field is reproduced exactly."""
    P = propagation_matrix(g, r, self_inclusive)
    if self_inclusive:
        x = X.data
        out = x.copy()
        for i, nb in enumerate(g.neighbors(r)):
            if nb:
                out[i] += (x[nb] - x[i]).sum(axis=0) / (len(nb) + 1)
    else:
        out = P @ X.data
    return _record("neighborhood_mean", out, (X,), lambda grad: (P.T @ grad,))


def gcn_layer_matrix(g: RelationalGraph, X: Tensor, p: GcnLayerParams) -> Tensor:
    """GCN hop on stacked node vectors X (N x D)."""
    _check_relations(g, p.num_relations)
    outs = []
    for r in range(p.num_relations):
        agg = neighborhood_mean(g, r, X, p.self_inclusive)
        outs.append(activate(add_row(matmul(agg, p.proj_w[r]), p.proj_b[r]), p.activation))
    return combine(outs, "mean")


def gcn_layer_forward(g: RelationalGraph, vectors: list[Tensor], p: GcnLayerParams) -> list[Tensor]:
    X = concat_rows(vectors)
    Y = gcn_layer_matrix(g, X, p)
    if Y.rows == 1:
        return [Y]
    return [slice_rows(Y, i, i + 1) for i in range(Y.rows)]
