import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlcfusion import _kernels as K

import oracles


conv_cases = st.tuples(
    st.integers(1, 2),  # B
    st.integers(1, 3),  # C
    st.integers(1, 3),  # O
    st.integers(3, 7),  # H
    st.integers(3, 7),  # W
    st.sampled_from([1, 3]),  # k
    st.integers(1, 2),  # stride
    st.integers(0, 1),  # pad
    st.integers(0, 2**31 - 1),
)


@given(conv_cases)
def test_conv_forward_matches_loop_oracle(case):
    B, C, O, H, W, k, s, p, seed = case
    r = np.random.default_rng(seed)
    x = r.standard_normal((B, C, H, W))
    w = r.standard_normal((O, C, k, k))
    ref = oracles.conv2d(x, w, None, s, p)
    np.testing.assert_allclose(K.nb_conv2d_forward(x, w, s, p), ref, atol=1e-12)
    np.testing.assert_allclose(K.np_conv2d_forward(x, w, s, p), ref, atol=1e-12)


@given(conv_cases)
def test_conv_backward_is_adjoint_of_forward(case):
    # <conv(x, w), g> = <x, dX(g)> = <w, dW(g)> for both kernel paths
    B, C, O, H, W, k, s, p, seed = case
    r = np.random.default_rng(seed)
    x = r.standard_normal((B, C, H, W))
    w = r.standard_normal((O, C, k, k))
    y = K.np_conv2d_forward(x, w, s, p)
    g = r.standard_normal(y.shape)
    lhs = float((y * g).sum())
    for bi, bw in ((K.nb_conv2d_backward_input, K.nb_conv2d_backward_weight),
                   (K.np_conv2d_backward_input, K.np_conv2d_backward_weight)):
        gx = bi(g, w, H, W, s, p)
        gw = bw(g, x, k, k, s, p)
        assert gx.shape == x.shape and gw.shape == w.shape
        assert np.isclose(float((x * gx).sum()), lhs, rtol=1e-10, atol=1e-10)
        assert np.isclose(float((w * gw).sum()), lhs, rtol=1e-10, atol=1e-10)


boxes = st.lists(
    st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 20), st.floats(0.5, 20)).map(
        lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
    ),
    min_size=0,
    max_size=6,
)


@given(boxes, boxes)
def test_iou_matrix_paths_agree_with_oracle(a, b):
    A = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    Bx = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ref = np.array([[oracles.box_iou(p, q) for q in b] for p in a]).reshape(len(a), len(b))
    np.testing.assert_allclose(K.nb_iou_matrix(A, Bx), ref, atol=1e-12)
    np.testing.assert_allclose(K.np_iou_matrix(A, Bx), ref, atol=1e-12)


@given(st.integers(0, 6), st.integers(0, 6), st.floats(0.05, 0.95), st.integers(0, 2**31 - 1))
def test_greedy_match_paths_agree(n, m, thresh, seed):
    r = np.random.default_rng(seed)
    # quantised IoUs make ties common
    ious = np.round(r.random((n, m)) * 4) / 4
    a = K.nb_greedy_match(ious, thresh)
    b = K.np_greedy_match(ious, thresh)
    np.testing.assert_array_equal(a, b)
    matched = a[a >= 0]
    assert len(set(matched.tolist())) == len(matched)
    for d, g in enumerate(a):
        if g >= 0:
            assert ious[d, g] >= thresh


def test_dispatch_flag_reflects_environment():
    assert isinstance(K.USE_NUMBA, bool)
    assert K.conv_output_size(8, 3, 2, 1) == 4


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_dispatch_output_shapes(stride, pad):
    x = np.ones((1, 2, 8, 8))
    w = np.ones((3, 2, 3, 3))
    y = K.conv2d_forward(x, w, stride, pad)
    n = K.conv_output_size(8, 3, stride, pad)
    assert y.shape == (1, 3, n, n)


@pytest.mark.parametrize("flag,expect", [("0", "False"), ("1", "True")])
def test_env_var_selects_path(flag, expect):
    import os
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-c", "from vlcfusion import _kernels as K; print(K.USE_NUMBA)"],
                         env={**os.environ, "VLCFUSION_NUMBA": flag}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expect
