import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsn.coattention import (CoattnParams, CoattnTrace, affinity, coattn_forward,
                             coattn_forward_composed, coattn_group, export_heatmap)
from gsn.tensor import NumericError, ShapeError, Tensor, combine, grad_check, mul, sum_all
from oracles import coattn_reference


def params(wi, bi, Wo, bo, activation="relu"):
    return CoattnParams(Tensor(np.reshape(wi, (1, -1))), Tensor([[bi]]), Tensor(Wo),
                        Tensor(np.reshape(bo, (1, -1))), activation)


def random_params(rng, D, activation="relu"):
    return params(rng.normal(size=3 * D), rng.normal(), rng.normal(size=(4 * D, D)) * 0.5,
                  rng.normal(size=D) * 0.1, activation)


# fixed instance, T=2, L=3, D=2; expected output frozen from tests/oracles.py
C_FIX = [[1.029, 1.642], [1.147, -0.973]]
S_FIX = [[-1.393, 0.067], [0.861, 0.509], [1.81, 0.751]]
WI_FIX = [0.64, -0.731, -1.108, 1.484, 0.049, 0.812]
WO_FIX = [[-1.376, -0.436], [-1.291, -0.776], [0.903, -1.481], [-0.534, 0.164],
          [-0.668, -0.252], [-0.222, 0.418], [-0.431, 0.272], [0.057, 0.425]]
BO_FIX = [0.225, 1.658]
O_FROZEN = [[-3.8988567438774893, -0.4842786308288116],
            [-0.7397620091677864, -0.3281225682191786]]


def test_matches_frozen_straight_line_values():
    p = params(WI_FIX, 0.25, WO_FIX, BO_FIX, "identity")
    O, _ = coattn_forward(Tensor(C_FIX), Tensor(S_FIX), p)
    assert np.max(np.abs(O.data - np.array(O_FROZEN))) < 1e-12
    live, _ = coattn_reference(C_FIX, S_FIX, WI_FIX, 0.25, WO_FIX, BO_FIX, relu=False)
    assert np.max(np.abs(np.array(live) - np.array(O_FROZEN))) == 0.0


def test_affinity_examples():
    D = 2
    C, S = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])
    assert affinity(C, S, params(np.ones(3 * D), 0.0, np.zeros((4 * D, D)), np.zeros(D))).item() == 21.0
    z = CoattnParams.zeros(8)
    M = affinity(Tensor(np.ones((5, 8))), Tensor(np.ones((7, 8))), z)
    assert M.shape == (7, 5) and not M.data.any()
    with pytest.raises(ShapeError):
        affinity(Tensor(np.ones((5, 8))), Tensor(np.ones((7, 4))), z)


def test_zero_proj_i_gives_uniform_attention():
    rng = np.random.default_rng(0)
    C, S = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(5, 3)))
    p = params(np.zeros(9), 0.0, rng.normal(size=(12, 3)), np.zeros(3))
    _, tr = coattn_forward(C, S, p)
    assert np.allclose(tr.a, 1 / 5, atol=1e-15)
    assert np.allclose(tr.tilde_S, np.tile(S.data.mean(axis=0), (4, 1)), atol=1e-14)
    assert np.allclose(tr.tilde_C, np.tile(C.data.mean(axis=0), (4, 1)), atol=1e-14)


def test_identity_selection_returns_current_node():
    rng = np.random.default_rng(1)
    D = 3
    Wo = np.vstack([np.eye(D), np.zeros((3 * D, D))])
    C = Tensor(rng.normal(size=(4, D)))
    O, _ = coattn_forward(C, Tensor(rng.normal(size=(2, D))), params(rng.normal(size=3 * D), 0.3, Wo, np.zeros(D), "identity"))
    assert np.array_equal(O.data, C.data)


@pytest.mark.parametrize("L", range(1, 10))
def test_output_keeps_current_length(L):
    rng = np.random.default_rng(L)
    O, tr = coattn_forward(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(L, 4))), random_params(rng, 4))
    assert O.shape == (3, 4)
    assert tr.M.shape == (L, 3) and tr.a.shape == (3, L) and tr.b.shape == (1, 3)
    assert tr.tilde_O.shape == (3, 16)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_trace_invariants(T, L, D, seed):
    rng = np.random.default_rng(seed)
    _, tr = coattn_forward(Tensor(rng.normal(size=(T, D))), Tensor(rng.normal(size=(L, D))),
                           random_params(rng, D))
    assert np.all(np.abs(tr.a.sum(axis=1) - 1) <= 1e-12)
    assert abs(tr.b.sum() - 1) <= 1e-12
    assert np.all(tr.tilde_C == tr.tilde_C[0])


def test_weight_count():
    for D in (1, 4, 8, 16):
        p = CoattnParams.init(D, np.random.default_rng(D))
        assert p.weight_count() == 3 * D + 4 * D * D


def test_fused_matches_composed_primitives():
    rng = np.random.default_rng(3)
    for act in ("relu", "identity"):
        p = random_params(rng, 5, act)
        C, S = Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=(4, 5)))
        fused, _ = coattn_forward(C, S, p)
        assert np.max(np.abs(fused.data - coattn_forward_composed(C, S, p).data)) < 1e-12


@pytest.mark.parametrize("combiner", ["max", "mean"])
def test_group_matches_per_edge_combination(combiner):
    rng = np.random.default_rng(4)
    p = random_params(rng, 4)
    C = Tensor(rng.normal(size=(3, 4)))
    nbrs = [Tensor(rng.normal(size=(L, 4))) for L in (2, 5, 1)] + [C]
    grouped = coattn_group(C, nbrs, p, combiner)
    separate = combine([coattn_forward(C, S, p)[0] for S in nbrs], combiner)
    assert np.max(np.abs(grouped.data - separate.data)) < 1e-12


def test_gradients_wrt_every_input():
    rng = np.random.default_rng(5)
    p = random_params(rng, 4)
    W = rng.normal(size=(3, 4))

    def f(C, S, wi, bi, wo, bo):
        return sum_all(mul(coattn_forward(C, S, CoattnParams(wi, bi, wo, bo))[0], Tensor(W)))

    rep = grad_check(f, [Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4))),
                         *p.tensors().values()])
    assert rep.passed, rep


def test_asymmetric_in_current_and_neighbor():
    rng = np.random.default_rng(6)
    p = random_params(rng, 3)
    A, B = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    assert not np.allclose(coattn_forward(A, B, p)[0].data, coattn_forward(B, A, p)[0].data)


def test_non_finite_raises():
    p = random_params(np.random.default_rng(7), 2)
    with pytest.raises(NumericError):
        coattn_forward(Tensor([[np.nan, 1.0]]), Tensor([[1.0, 1.0]]), p)


def _trace(M):
    M = np.asarray(M, dtype=float)
    z = np.zeros((M.shape[1], 1))
    return CoattnTrace(M, z, z.T, z, z, z, z)


def test_heatmap_csv_fixture():
    csv, pgm = export_heatmap(_trace([[0, 1], [1, 0]]))
    assert csv == ",c0,c1\nn0,0.268941,0.731059\nn1,0.731059,0.268941\n"
    raw, _ = export_heatmap(_trace([[0, 1], [1, 0]]), normalize="none")
    assert raw == ",c0,c1\nn0,0.000000,1.000000\nn1,1.000000,0.000000\n"
    assert pgm == b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0])


def test_heatmap_constant_is_uniform_and_dimensions():
    csv, pgm = export_heatmap(_trace(np.full((4, 3), 2.5)))
    rows = [line.split(",")[1:] for line in csv.strip().split("\n")[1:]]
    assert len(rows) == 4 and all(len(r) == 3 for r in rows)
    assert {v for r in rows for v in r} == {"0.250000"}
    header, body = pgm[:pgm.index(b"255\n") + 4], pgm[pgm.index(b"255\n") + 4:]
    assert header == b"P5\n3 4\n255\n" and len(body) == 12


def test_heatmap_token_labels():
    csv, _ = export_heatmap(_trace([[1.0, 2.0, 3.0]]), current_tokens=[7, 8, 9], neighbor_tokens=["x"])
    assert csv.startswith(",7,8,9\nx,")
    with pytest.raises(ShapeError):
        export_heatmap(_trace([[1.0]]), current_tokens=[1, 2])
