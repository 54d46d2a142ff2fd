import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from coswin import tensor as T
from coswin.exceptions import ContractError, NonFiniteError, PrecisionError, ShapeError
from coswin.tensor import Tensor
from coswin.verification import DEFAULT_TOL, finite_diff_gradcheck, gradcheck_suite


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def nested_loop_conv(x, w, b):
    h, wd, cin = x.shape
    cout = w.shape[3]
    out = np.zeros((h, wd, cout))
    for i in range(h):
        for j in range(wd):
            for o in range(cout):
                s = b[o]
                for di in range(3):
                    for dj in range(3):
                        for c in range(cin):
                            y, xx = i + di - 1, j + dj - 1
                            if 0 <= y < h and 0 <= xx < wd:
                                s += x[y, xx, c] * w[di, dj, c, o]
                out[i, j, o] = s
    return out


# -- matmul ---------------------------------------------------------------------

def test_matmul_identity():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)


def test_matmul_row_by_column():
    out = T.matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]])))
    assert out.data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop_exactly():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    out = T.matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(out - triple_loop_matmul(a, b))) <= 1e-15


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_batch_dims_must_match_exactly():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((3, 3, 4))))


# -- softmax ----------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_last_dim(Tensor(np.zeros(3))).data, [1 / 3] * 3)


def test_softmax_singleton():
    assert T.softmax_last_dim(Tensor(np.array([5.0]))).data.tolist() == [1.0]


def test_softmax_two_element_analytic():
    out = T.softmax_last_dim(Tensor(np.array([0.0, math.log(3.0)]))).data
    np.testing.assert_allclose(out, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_stable_for_large_logits():
    out = T.softmax_last_dim(Tensor(np.array([1000.0, 1000.0], dtype=np.float32))).data
    np.testing.assert_allclose(out, [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50, width=32)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_last_dim(Tensor(x)).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-5)


# -- conv2d_3x3 -------------------------------------------------------------------------

def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 4, 1))
    w = np.zeros((3, 3, 1, 1))
    w[1, 1, 0, 0] = 1.0
    out = T.conv2d_3x3(Tensor(x), Tensor(w), Tensor(np.zeros(1))).data
    np.testing.assert_array_equal(out, x)


def test_conv_all_ones_counts_taps():
    out = T.conv2d_3x3(Tensor(np.ones((5, 5, 1))), Tensor(np.ones((3, 3, 1, 1))),
                       Tensor(np.zeros(1))).data[..., 0]
    assert out[2, 2] == 9 and out[1, 3] == 9
    assert out[0, 0] == out[0, 4] == out[4, 0] == out[4, 4] == 4
    assert out[0, 2] == 6


def test_conv_matches_nested_loops_exactly():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((4, 4, 2)), rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3)
    out = T.conv2d_3x3(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.max(np.abs(out - nested_loop_conv(x, w, b))) < 1e-14


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d_3x3(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))


def test_conv_preserves_spatial_size_with_batch():
    out = T.conv2d_3x3(Tensor(np.zeros((2, 7, 3, 4))), Tensor(np.zeros((3, 3, 4, 5))))
    assert out.shape == (2, 7, 3, 5)


# -- layer_norm ----------------------------------------------------------------------

def test_layer_norm_constant_slice_collapses_to_bias():
    out = T.layer_norm(Tensor(np.full(3, 7.0)), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(out, [0.0, 0.0, 0.0])


def test_layer_norm_already_normalised():
    out = T.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       eps=0.0).data
    np.testing.assert_array_equal(out, [1.0, -1.0])


def test_layer_norm_matches_formula():
    rng = np.random.default_rng(3)
    x, g, b = rng.standard_normal((4, 9)), rng.standard_normal(9), rng.standard_normal(9)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b
    out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b), 1e-5).data
    assert np.max(np.abs(out - ref)) < 1e-12


# -- activations --------------------------------------------------------------------

def test_relu_values_and_zero_subgradient():
    x = leaf([-1.0, 0.0, 2.0])
    y = T.relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    g = T.backward(T.tsum(y))[x]
    assert g.tolist() == [0.0, 0.0, 1.0]


def test_gelu_zero_and_asymptote():
    assert T.gelu(Tensor(np.array([0.0]))).data[0] == 0.0
    big = np.array([10.0, 25.0])
    assert np.max(np.abs(T.gelu(Tensor(big)).data - big)) < 1e-6


def test_gelu_is_tanh_approximation():
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=0, atol=1e-15)


# -- cyclic_shift ---------------------------------------------------------------------

def test_cyclic_shift_zero_and_full_wrap_are_identity():
    x = np.random.default_rng(4).standard_normal((3, 5, 2))
    np.testing.assert_array_equal(T.cyclic_shift(Tensor(x), 0, 0).data, x)
    np.testing.assert_array_equal(T.cyclic_shift(Tensor(x), 3, 5).data, x)


def test_cyclic_shift_two_by_two_permutation():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    grid = np.array([[a, b], [c, d]])[..., None]
    out = T.cyclic_shift(Tensor(grid), 1, 1).data[..., 0]
    assert out.tolist() == [[d, c], [b, a]]


def test_cyclic_shift_index_rule():
    x = np.arange(4 * 6).reshape(4, 6, 1).astype(np.float64)
    out = T.cyclic_shift(Tensor(x), 1, -2).data
    for i in range(4):
        for j in range(6):
            assert out[i, j, 0] == x[(i + 1) % 4, (j - 2) % 6, 0]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(-9, 9), st.integers(-9, 9),
       st.integers(0, 2 ** 31))
def test_cyclic_shift_inverse_exact(h, w, dy, dx, seed):
    x = np.random.default_rng(seed).standard_normal((h, w, 2)).astype(np.float32)
    back = T.cyclic_shift(T.cyclic_shift(Tensor(x), dy, dx), -dy, -dx).data
    assert np.array_equal(back, x)


# -- reshape / permute ------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=2, max_size=4), st.randoms(use_true_random=False))
def test_reshape_permute_round_trip(shape, rnd):
    x = np.random.default_rng(len(shape)).standard_normal(shape)
    axes = list(range(len(shape)))
    rnd.shuffle(axes)
    inv = list(np.argsort(axes))
    y = T.permute(T.permute(Tensor(x), axes), inv).data
    assert np.array_equal(y, x)
    z = T.reshape(T.reshape(Tensor(x), (-1,)), shape).data
    assert np.array_equal(z, x)


def test_reshape_size_mismatch():
    with pytest.raises(ShapeError):
        T.reshape(Tensor(np.zeros(6)), (4,))


# -- backward -------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(5).standard_normal((2, 3, 4)))
    assert np.array_equal(T.backward(T.tsum(x))[x], np.ones((2, 3, 4)))


def test_backward_square_gives_2x():
    xv = np.random.default_rng(6).standard_normal(5)
    x = leaf(xv)
    np.testing.assert_array_equal(T.backward(T.tsum(T.mul(x, x)))[x], 2 * xv)


def test_backward_accumulates_over_paths():
    x = leaf([1.0, 2.0])
    y = T.add(T.scale(x, 3.0), T.mul(x, x))
    np.testing.assert_array_equal(T.backward(T.tsum(y))[x], [5.0, 7.0])


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        T.backward(T.scale(leaf([1.0, 2.0]), 2.0))


def test_every_leaf_gets_gradient_of_its_shape():
    a, b = leaf(np.ones((2, 3))), leaf(np.ones((3, 4)))
    c = leaf(np.ones(4))
    grads = T.backward(T.tsum(T.linear(T.matmul(a, b), Tensor(np.ones((4, 4))), c)))
    for t in (a, b, c):
        assert grads[t].shape == t.shape


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert y.node is None and not y.requires_grad


def test_deep_chain_does_not_recurse():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = T.scale(y, 1.0)
    assert T.backward(T.tsum(y))[x].tolist() == [1.0]


# -- value contracts -------------------------------------------------------------------

@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor(np.array([1000.0])))


def test_mixed_precision_rejected():
    with pytest.raises(PrecisionError):
        T.add(Tensor(np.zeros(2, np.float32)), Tensor(np.zeros(2, np.float64)))


def test_integer_data_becomes_single_precision():
    assert Tensor(np.zeros(2, dtype=np.int32)).dtype == np.float32


def test_unsupported_precision_rejected():
    with pytest.raises(PrecisionError):
        Tensor(np.zeros(2), dtype=np.float16)


# -- RNG and initializers ----------------------------------------------------------------

def test_same_seed_same_stream():
    a = T.trunc_normal((50,), 0.02, T.make_rng(3, "w"))
    b = T.trunc_normal((50,), 0.02, T.make_rng(3, "w"))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, T.trunc_normal((50,), 0.02, T.make_rng(3, "v")))


def test_trunc_normal_bounds():
    x = T.trunc_normal((10000,), 0.02, T.make_rng(0))
    assert np.max(np.abs(x)) <= 0.04 + 1e-9
    assert 0.015 < x.std() < 0.02


def test_constant_tensor():
    t = T.constant_tensor((2, 3), 0.1)
    assert t.requires_grad and np.all(t.data == np.float32(0.1))


# -- gradient correctness over random points -----------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_at_random_points(seed):
    reports = gradcheck_suite("op", seed=seed)
    assert {r.name for r in reports} >= set(T.OP_NAMES)
    bad = [r.summary() for r in reports if not r.passed(DEFAULT_TOL)]
    assert not bad


def test_cross_entropy_gradient_tight():
    (report,) = gradcheck_suite("op", seed=0, only=["cross_entropy"])
    assert report.max_error < 1e-6


def test_quadratic_gradcheck_near_exact():
    x = leaf(np.random.default_rng(7).standard_normal((4, 5)))
    report = finite_diff_gradcheck(lambda: T.tsum(T.mul(x, x)), {"x": x})
    assert report.max_error < 1e-9


@pytest.mark.parametrize("op", ["matmul", "softmax", "conv2d_3x3", "layer_norm", "reshape"])
def test_injected_fault_is_caught(op):
    reports = gradcheck_suite("op", seed=0, fault=(op, 1.5), only=[op])
    assert not reports[0].passed(DEFAULT_TOL)
