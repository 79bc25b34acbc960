"""Span extraction, node classification and graph readout heads; EM/F1 metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import AttentivePoolParams, ConfigError, summarize_node
from .tensor import (Tensor, add_row, bce_with_logits, concat_rows, log_softmax_rows, matmul,
                     negate, pick, sigmoid, softmax_rows, add, transpose, scale)

DEFAULT_WINDOW = 30


def _uniform(rng, shape):
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-bound, bound, shape), True)


def _zeros(shape):
    return Tensor(np.zeros(shape), True)


# -------------------------------------------------------------------- span

@dataclass
class SpanParams:
    start_w: Tensor  # D x 1
    start_b: Tensor
    end_w: Tensor
    end_b: Tensor

    def tensors(self):
        return {"start_w": self.start_w, "start_b": self.start_b,
                "end_w": self.end_w, "end_b": self.end_b}

    @classmethod
    def init(cls, dim, rng):
        return cls(_uniform(rng, (dim, 1)), _zeros((1, 1)), _uniform(rng, (dim, 1)), _zeros((1, 1)))


@dataclass
class SpanPrediction:
    start_logits: Tensor  # 1 x total length
    end_logits: Tensor
    decoded: tuple[int, int]


def decode_span(start: np.ndarray, end: np.ndarray, window: int = DEFAULT_WINDOW) -> tuple[int, int]:
    """Argmax start, then argmax end within [start, start + window]."""
    start = np.asarray(start).ravel()
    end = np.asarray(end).ravel()
    s = int(start.argmax())
    hi = min(len(end), s + window + 1)
    e = s + int(end[s:hi].argmax())
    return s, e


def span_head(states: Sequence[Tensor], order: Sequence[int], p: SpanParams,
              window: int = DEFAULT_WINDOW) -> SpanPrediction:
    if not states:
        raise ValueError("span_head: empty graph")
    if sorted(order) != list(range(len(states))):
        raise ValueError("span_head: order must be a permutation of node ids")
    X = concat_rows([states[i] for i in order])
    start = transpose(add_row(matmul(X, p.start_w), p.start_b))
    end = transpose(add_row(matmul(X, p.end_w), p.end_b))
    return SpanPrediction(start, end, decode_span(start.data, end.data, window))


def span_loss(pred: SpanPrediction, gold: tuple[int, int]) -> Tensor:
    s, e = gold
    ls = pick(log_softmax_rows(pred.start_logits), 0, s)
    le = pick(log_softmax_rows(pred.end_logits), 0, e)
    return negate(add(ls, le))


# -------------------------------------------------------------------- nodes

@dataclass
class NodeHeadParams:
    pool: AttentivePoolParams | None
    w: Tensor  # D x 1
    b: Tensor
    summarizer: str = "attentive"

    def tensors(self):
        out = {"w": self.w, "b": self.b}
        if self.pool is not None:
            out.update({f"pool.{k}": v for k, v in self.pool.tensors().items()})
        return out

    @classmethod
    def init(cls, dim, rng, summarizer="attentive"):
        pool = AttentivePoolParams.init(dim, rng) if summarizer == "attentive" else None
        return cls(pool, _uniform(rng, (dim, 1)), _zeros((1, 1)), summarizer)


@dataclass
class NodeOutput:
    logits: Tensor  # N x 1
    probs: Tensor

    def predicted(self, threshold: float = 0.5) -> frozenset[int]:
        return frozenset(int(i) for i in np.flatnonzero(self.probs.data[:, 0] >= threshold))


def node_head(states: Sequence[Tensor], p: NodeHeadParams) -> NodeOutput:
    H = concat_rows([summarize_node(V, p.summarizer, p.pool) for V in states])
    logits = add_row(matmul(H, p.w), p.b)
    return NodeOutput(logits, sigmoid(logits))


def node_loss(out: NodeOutput, labels: Sequence[int]) -> Tensor:
    return bce_with_logits(out.logits, labels)


# -------------------------------------------------------------------- graph

@dataclass
class ReadoutParams:
    pool1: AttentivePoolParams  # tokens -> node vector
    pool2: AttentivePoolParams  # node vectors -> graph vector
    w: Tensor                   # D x num_classes
    b: Tensor

    def __post_init__(self):
        if self.w.cols < 2:
            raise ConfigError("graph classification needs at least 2 classes")

    def tensors(self):
        out = {"w": self.w, "b": self.b}
        out.update({f"pool1.{k}": v for k, v in self.pool1.tensors().items()})
        out.update({f"pool2.{k}": v for k, v in self.pool2.tensors().items()})
        return out

    @classmethod
    def init(cls, dim, num_classes, rng):
        return cls(AttentivePoolParams.init(dim, rng), AttentivePoolParams.init(dim, rng),
                   _uniform(rng, (dim, num_classes)), _zeros((1, num_classes)))


@dataclass
class GraphOutput:
    logits: Tensor  # 1 x C
    probs: Tensor

    @property
    def predicted(self) -> int:
        return int(self.probs.data.argmax())


def graph_head(states: Sequence[Tensor], p: ReadoutParams) -> GraphOutput:
    if not states:
        raise ValueError("graph_head: no nodes")
    H = concat_rows([summarize_node(V, "attentive", p.pool1) for V in states])
    g = summarize_node(H, "attentive", p.pool2)
    logits = add_row(matmul(g, p.w), p.b)
    return GraphOutput(logits, softmax_rows(logits))


def graph_loss(out: GraphOutput, label: int) -> Tensor:
    return negate(pick(log_softmax_rows(out.logits), 0, int(label)))


def joint_loss(span: Tensor, sup: Tensor, lam: float = 0.5) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"joint loss weight must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return span
    if lam == 0.0:
        return sup
    return add(scale(span, lam), scale(sup, 1.0 - lam))


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class Prediction:
    """Predicted or gold labels for one example; unused fields stay None."""

    span: tuple[int, int] | None = None
    support: frozenset[int] | None = None
    label: int | None = None


def _prf(tp: float, n_pred: float, n_gold: float) -> tuple[float, float, float]:
    prec = tp / n_pred if n_pred > 0 else 0.0
    rec = tp / n_gold if n_gold > 0 else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return prec, rec, f1


def span_scores(pred: tuple[int, int], gold: tuple[int, int]) -> tuple[float, float, float, float]:
    """(em, precision, recall, f1) of token-index overlap."""
    overlap = max(0, min(pred[1], gold[1]) - max(pred[0], gold[0]) + 1)
    prec, rec, f1 = _prf(overlap, pred[1] - pred[0] + 1, gold[1] - gold[0] + 1)
    return float(tuple(pred) == tuple(gold)), prec, rec, f1


def support_scores(pred: frozenset, gold: frozenset) -> tuple[float, float, float, float]:
    tp = len(pred & gold)
    prec, rec, f1 = _prf(tp, len(pred), len(gold))
    return float(set(pred) == set(gold)), prec, rec, f1


def metrics(predictions: Sequence[Prediction], gold: Sequence[Prediction]) -> dict[str, float]:
    """Mean EM/F1 per task, joint EM/F1 when both tasks are present, accuracy for labels.

    Joint precision and recall are per-example products of the two tasks'.
    """
    if len(predictions) != len(gold):
        raise ValueError(f"{len(predictions)} predictions for {len(gold)} gold examples")
    if not gold:
        raise ValueError("metrics: no examples")
    sums: dict[str, float] = {}

    def acc(key, v):
        sums[key] = sums.get(key, 0.0) + v

    for p, g in zip(predictions, gold):
        a = s = None
        if g.span is not None and p.span is not None:
            a = span_scores(p.span, g.span)
            acc("ans_em", a[0])
            acc("ans_f1", a[3])
        if g.support is not None and p.support is not None:
            s = support_scores(p.support, g.support)
            acc("sup_em", s[0])
            acc("sup_f1", s[3])
        if a is not None and s is not None:
            jp, jr = a[1] * s[1], a[2] * s[2]
            jf1 = 2 * jp * jr / (jp + jr) if jp + jr > 0 else 0.0
            acc("joint_em", a[0] * s[0])
            acc("joint_f1", jf1)
        if g.label is not None and p.label is not None:
            acc("accuracy", float(p.label == g.label))
    n = len(gold)
    order = ("ans_em", "ans_f1", "sup_em", "sup_f1", "joint_em", "joint_f1", "accuracy")
    return {k: sums[k] / n for k in order if k in sums}


def format_report(m: dict[str, float]) -> str:
    return "".join(f"{k} = {v:.4f}\n" for k, v in m.items())


def report_json(m: dict[str, float]) -> str:
    return json.dumps({k: round(v, 4) for k, v in m.items()}, indent=2) + "\n"
