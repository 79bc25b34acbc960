import os
import subprocess
import sys

import numpy as np
import pytest

from gsn import _pykernels, kernels

ck = pytest.importorskip("gsn._ckernels", reason="compiled core not built")


def case(rng, T, D, lengths):
    C = rng.normal(size=(T, D))
    S = rng.normal(size=(sum(lengths), D))
    offsets = np.cumsum([0] + list(lengths))
    return C, S, offsets, rng.normal(size=3 * D), float(rng.normal()), rng.normal(size=(4 * D, D)) * 0.4, \
        rng.normal(size=D) * 0.1


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("relu", [True, False])
def test_single_edge_backends_agree(seed, relu):
    rng = np.random.default_rng(seed)
    C, S, _, wi, bi, Wo, bo = case(rng, 1 + seed, 3 + seed % 3, [2 + seed])
    O1, c1 = _pykernels.coattn_forward(C, S, wi, bi, Wo, bo, relu)
    O2, c2 = ck.coattn_forward(C, S, wi, bi, Wo, bo, relu)
    assert np.max(np.abs(O1 - np.asarray(O2))) < 1e-12
    gO = rng.normal(size=O1.shape)
    g1 = _pykernels.coattn_backward(gO, C, S, wi, Wo, relu, c1)
    g2 = ck.coattn_backward(gO, C, S, wi, Wo, relu, c2)
    for a, b in zip(g1, g2):
        assert np.max(np.abs(np.asarray(a) - np.asarray(b))) < 1e-11


@pytest.mark.parametrize("use_max", [True, False])
@pytest.mark.parametrize("lengths", [[3], [2, 5, 1], [4, 4, 4, 4, 4]])
def test_group_backends_agree(use_max, lengths):
    rng = np.random.default_rng(len(lengths))
    C, S, offsets, wi, bi, Wo, bo = case(rng, 4, 5, lengths)
    o1, c1 = _pykernels.group_forward(C, S, offsets, wi, bi, Wo, bo, True, use_max)
    o2, c2 = ck.group_forward(C, S, offsets, wi, bi, Wo, bo, True, use_max)
    assert np.max(np.abs(o1 - np.asarray(o2))) < 1e-12
    gO = rng.normal(size=o1.shape)
    g1 = _pykernels.group_backward(gO, C, S, offsets, wi, Wo, True, use_max, c1)
    g2 = ck.group_backward(gO, C, S, offsets, wi, Wo, True, use_max, c2)
    for a, b in zip(g1, g2):
        assert np.max(np.abs(np.asarray(a) - np.asarray(b))) < 1e-11


def test_selected_backend_is_compiled():
    assert kernels.BACKEND == "cython"


def test_env_var_selects_python_fallback():
    env = dict(os.environ, GSN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from gsn import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
