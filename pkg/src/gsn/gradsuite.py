"""Finite-difference checks for every primitive, the co-attention block,
a GSN stack and each task head. Used by ``gsn gradcheck`` and the tests."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .coattention import CoattnParams, coattn_forward, coattn_group
from .graph import RelationalGraph, SequenceNode
from .heads import (NodeHeadParams, ReadoutParams, SpanParams, graph_head, graph_loss, joint_loss,
                    node_head, node_loss, span_head, span_loss)
from .layers import AttentivePoolParams, GsnLayerParams, gsn_stack_forward
from .tensor import Tensor, grad_check

Case = tuple[str, Callable[..., Tensor], list[Tensor]]


def _t(rng, r, c):
    return Tensor(rng.normal(size=(r, c)))


def _scalar(out: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted sum, so no output element's gradient is accidentally symmetric."""
    return T.sum_all(T.mul(out, Tensor(weights)))


def _wrap(rng, op, shape_of_out):
    w = rng.normal(size=shape_of_out)
    return lambda *xs: _scalar(op(*xs), w)


def primitive_cases(rng: np.random.Generator, max_side: int = 5) -> list[Case]:
    def side():
        return int(rng.integers(1, max_side + 1))

    r, k, c = side(), side(), side()
    cases: list[Case] = []

    def add_case(name, op, inputs, out_shape):
        cases.append((name, _wrap(rng, op, out_shape), inputs))

    add_case("matmul", T.matmul, [_t(rng, r, k), _t(rng, k, c)], (r, c))
    add_case("transpose", T.transpose, [_t(rng, r, c)], (c, r))
    for name, op in (("add", T.add), ("sub", T.sub), ("mul", T.mul)):
        add_case(name, op, [_t(rng, r, c), _t(rng, r, c)], (r, c))
    add_case("scale", lambda a: T.scale(a, 1.7), [_t(rng, r, c)], (r, c))
    add_case("negate", T.negate, [_t(rng, r, c)], (r, c))
    add_case("add_row", T.add_row, [_t(rng, r, c), _t(rng, 1, c)], (r, c))
    add_case("repeat_rows", lambda a: T.repeat_rows(a, r), [_t(rng, 1, c)], (r, c))
    add_case("softmax_rows", T.softmax_rows, [_t(rng, r, c)], (r, c))
    add_case("log_softmax_rows", T.log_softmax_rows, [_t(rng, r, c)], (r, c))
    for axis in ("rows", "cols"):
        for kind in ("max", "mean", "sum"):
            shape = (1, c) if axis == "rows" else (r, 1)
            add_case(f"reduce_{axis}_{kind}", lambda a, ax=axis, kd=kind: T.reduce(a, ax, kd),
                     [_t(rng, r, c)], shape)
    add_case("sum_all", T.sum_all, [_t(rng, r, c)], (1, 1))
    add_case("concat_cols", lambda a, b: T.concat_cols([a, b]), [_t(rng, r, c), _t(rng, r, k)], (r, c + k))
    add_case("concat_rows", lambda a, b: T.concat_rows([a, b]), [_t(rng, r, c), _t(rng, k, c)], (r + k, c))
    lo = int(rng.integers(0, c))
    add_case("slice_cols", lambda a: T.slice_cols(a, lo, c), [_t(rng, r, c)], (r, c - lo))
    lo_r = int(rng.integers(0, r))
    add_case("slice_rows", lambda a: T.slice_rows(a, lo_r, r), [_t(rng, r, c)], (r - lo_r, c))
    ids = [int(i) for i in rng.integers(0, r, size=k)]
    add_case("take_rows", lambda a: T.take_rows(a, ids), [_t(rng, r, c)], (k, c))
    pr, pc = int(rng.integers(0, r)), int(rng.integers(0, c))
    add_case("pick", lambda a: T.pick(a, pr, pc), [_t(rng, r, c)], (1, 1))
    add_case("relu", T.relu, [_t(rng, r, c)], (r, c))
    add_case("tanh", T.tanh, [_t(rng, r, c)], (r, c))
    add_case("sigmoid", T.sigmoid, [_t(rng, r, c)], (r, c))
    add_case("identity", lambda a: T.activate(a, "identity"), [_t(rng, r, c)], (r, c))
    for kind in ("max", "mean"):
        add_case(f"combine_{kind}", lambda a, b, z, kd=kind: T.combine([a, b, z], kd),
                 [_t(rng, r, c) for _ in range(3)], (r, c))
    targets = rng.integers(0, 2, size=(r, 1))
    cases.append(("bce_with_logits", lambda a: T.bce_with_logits(a, targets), [_t(rng, r, 1)]))
    return cases


def _coattn_leaves(rng, D):
    p = CoattnParams.init(D, rng)
    # nonzero biases so their gradients are exercised too
    return [p.proj_i_w, Tensor(rng.normal(size=(1, 1))), p.proj_o_w,
            Tensor(0.1 * rng.normal(size=(1, D)))]


def _params_from(leaves, activation="relu"):
    return CoattnParams(*leaves[:4], activation)


def _toy_graph(rng, n=4, relations=2, D=4, lengths=(2, 3)) -> RelationalGraph:
    nodes = tuple(SequenceNode(i, features=rng.normal(size=(int(rng.choice(lengths)), D)))
                  for i in range(n))
    rels = (frozenset({(0, 1), (1, 2), (2, 3)}), frozenset({(0, 2), (1, 3)}))[:relations]
    return RelationalGraph(nodes, rels, answer=(n - 1, 0, nodes[-1].length - 1), label=1)


def model_cases(rng: np.random.Generator) -> list[Case]:
    cases: list[Case] = []
    D = 4
    C, S = _t(rng, 3, D), _t(rng, 5, D)
    for act in ("relu", "identity"):
        w = rng.normal(size=(3, D))
        cases.append((f"coattn_{act}",
                      lambda C, S, *ps, a=act, w=w: _scalar(coattn_forward(C, S, _params_from(ps, a))[0], w),
                      [C, S, *_coattn_leaves(rng, D)]))
    S2 = _t(rng, 2, D)
    for comb in ("max", "mean"):
        w = rng.normal(size=(3, D))
        cases.append((f"coattn_group_{comb}",
                      lambda C, S, S2, *ps, k=comb, w=w:
                      _scalar(coattn_group(C, [S, S2, C], _params_from(ps), k), w),
                      [C, S, S2, *_coattn_leaves(rng, D)]))

    g = _toy_graph(rng, D=D)
    n, R = g.num_nodes, g.num_relations
    feats = [Tensor(node.features) for node in g.nodes]

    def stack(leaves, layers):
        states = list(leaves[:n])
        ps = leaves[n:]
        per = 4 * R
        params = [GsnLayerParams([_params_from(ps[k * per + 4 * r: k * per + 4 * r + 4]) for r in range(R)], "max")
                  for k in range(layers)]
        return gsn_stack_forward(g, states, params)[0], leaves[n + layers * per:]

    def gsn_leaves(layers):
        return [x for _ in range(layers) for _ in range(R) for x in _coattn_leaves(rng, D)]

    ws = [rng.normal(size=(node.length, D)) for node in g.nodes]

    def stack_scalar(*leaves):
        out, _ = stack(leaves, 2)
        return T.sum_all(T.concat_rows([T.mul(o, Tensor(w)) for o, w in zip(out, ws)]))

    cases.append(("gsn_stack_2layer_2rel", stack_scalar, feats + gsn_leaves(2)))

    span = SpanParams.init(D, rng)
    cases.append(("span_head", lambda *l: _span_case(l, stack, g),
                  feats + gsn_leaves(1) + list(span.tensors().values())))
    sup = NodeHeadParams.init(D, rng)
    labels = [1, 0, 1, 0]
    cases.append(("node_head", lambda *l: _node_case(l, stack, labels),
                  feats + gsn_leaves(1) + [sup.w, sup.b, sup.pool.W, sup.pool.u]))
    ro = ReadoutParams.init(D, 3, rng)
    cases.append(("graph_head", lambda *l: _graph_case(l, stack),
                  feats + gsn_leaves(1) + [ro.w, ro.b, ro.pool1.W, ro.pool1.u, ro.pool2.W, ro.pool2.u]))
    cases.append(("joint_loss", lambda *l: _joint_case(l, stack, g, labels),
                  feats + gsn_leaves(1) + list(span.tensors().values())
                  + [sup.w, sup.b, sup.pool.W, sup.pool.u]))
    return cases


def _span_case(leaves, stack, g):
    states, rest = stack(leaves, 1)
    return span_loss(span_head(states, range(len(states)), SpanParams(*rest)), g.answer_global())


def _node_case(leaves, stack, labels):
    states, (w, b, W, u) = stack(leaves, 1)
    return node_loss(node_head(states, NodeHeadParams(AttentivePoolParams(W, u), w, b)), labels)


def _graph_case(leaves, stack):
    states, (w, b, W1, u1, W2, u2) = stack(leaves, 1)
    p = ReadoutParams(AttentivePoolParams(W1, u1), AttentivePoolParams(W2, u2), w, b)
    return graph_loss(graph_head(states, p), 1)


def _joint_case(leaves, stack, g, labels):
    states, rest = stack(leaves, 1)
    sp = span_loss(span_head(states, range(len(states)), SpanParams(*rest[:4])), g.answer_global())
    w, b, W, u = rest[4:]
    su = node_loss(node_head(states, NodeHeadParams(AttentivePoolParams(W, u), w, b)), labels)
    return joint_loss(sp, su, 0.3)


def run_suite(seed: int = 0, h: float = 1e-5, tol: float = 1e-5,
              max_side: int = 5) -> list[tuple[str, T.GradCheckReport]]:
    rng = np.random.default_rng(seed)
    out = []
    for name, f, inputs in primitive_cases(rng, max_side) + model_cases(rng):
        out.append((name, grad_check(f, inputs, h=h, tol=tol)))
    return out
