import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv2d_loops, maxpool_backward_scan, maxpool_scan, softmax_ce_mp
from squeezekit import tensor_core as tc
from squeezekit.errors import ParameterError, ShapeError


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def T(a):
    return tc.Tensor(np.asarray(a, dtype=np.float32))


# --- Tensor -----------------------------------------------------------------

def test_tensor_flat_data_and_shape():
    t = tc.Tensor([1, 2, 3, 4, 5, 6], shape=[2, 3])
    assert t.shape == (2, 3)
    assert t.data.dtype == np.float32
    assert t.flat().tolist() == [1, 2, 3, 4, 5, 6]


def test_tensor_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        tc.Tensor([1, 2, 3], shape=[2, 2])
    with pytest.raises(ShapeError):
        tc.Tensor(np.zeros((0, 3)))


# --- conv2d -----------------------------------------------------------------

def test_conv_identity_1x1():
    x = np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3)
    w = np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1)
    out = tc.conv2d(T(x), T(w), T(np.zeros(2)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_constant_input_interior_and_corner():
    c = 1.5
    x = np.full((1, 5, 5), c, dtype=np.float32)
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    out = tc.conv2d_forward(x, w, np.zeros(1, np.float32), stride=1, pad=1)[0]
    assert out[2, 2] == pytest.approx(9 * c)
    for y, xx in [(0, 0), (0, 4), (4, 0), (4, 4)]:
        assert out[y, xx] == pytest.approx(4 * c)
    assert out[0, 2] == pytest.approx(6 * c)


def test_conv_matches_loop_oracle_strided(rng):
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = tc.conv2d_forward(x, w, b, stride=2, pad=1)
    want = conv2d_loops(x, w, b, 2, 1)
    assert got.shape == (4, 4, 4)
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-6)


def test_conv_batched_equals_per_sample(rng):
    x = rng.standard_normal((3, 2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((5, 2, 3, 3)).astype(np.float32)
    b = np.zeros(5, np.float32)
    batched = tc.conv2d_forward(x, w, b, 1, 1)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], tc.conv2d_forward(x[i], w, b, 1, 1))


def test_conv_channel_mismatch_names_both_extents():
    with pytest.raises(ShapeError, match="3 channels.*expect 2"):
        tc.conv2d_forward(np.zeros((3, 4, 4)), np.zeros((1, 2, 1, 1)))


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(ShapeError):
        tc.conv2d_forward(np.zeros((1, 2, 2)), np.zeros((1, 1, 5, 5)), pad=1)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 12), k=st.integers(1, 5), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv_output_shape_formula(h, k, stride, pad):
    if h + 2 * pad < k:
        with pytest.raises(ShapeError):
            tc.conv2d_forward(np.zeros((1, h, h)), np.zeros((2, 1, k, k)), None, stride, pad)
        return
    out = tc.conv2d_forward(np.zeros((1, h, h)), np.zeros((2, 1, k, k)), None, stride, pad)
    expected = (h + 2 * pad - k) // stride + 1
    assert out.shape == (2, expected, expected)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(1, 8), f=st.integers(1, 8),
       h=st.integers(3, 16), k=st.sampled_from([1, 3]), stride=st.integers(1, 2))
def test_conv_matches_loops_property(seed, c, f, h, k, stride):
    r = np.random.default_rng(seed)
    pad = k // 2
    x = r.standard_normal((c, h, h)).astype(np.float32)
    w = r.standard_normal((f, c, k, k)).astype(np.float32)
    b = r.standard_normal(f).astype(np.float32)
    got = tc.conv2d_forward(x, w, b, stride, pad)
    want = conv2d_loops(x, w, b, stride, pad)
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-5)


# --- conv backward ------------------------------------------------------------

def test_conv_backward_identity_passes_grad(rng):
    x = rng.standard_normal((2, 4, 4))
    w = np.eye(2).reshape(2, 2, 1, 1)
    g = rng.standard_normal((2, 4, 4))
    gx, _, _ = tc.conv2d_backward(g, x, w, 1, 0)
    np.testing.assert_allclose(gx, g)


def test_conv_backward_bias_is_spatial_sum(rng):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    g = rng.standard_normal((3, 5, 5))
    _, _, gb = tc.conv2d_backward(g, x, w, 1, 1)
    np.testing.assert_allclose(gb, g.sum(axis=(1, 2)))


def test_conv_backward_shape_error(rng):
    with pytest.raises(ShapeError):
        tc.conv2d_backward(np.zeros((3, 4, 4)), np.zeros((2, 5, 5)), np.zeros((3, 2, 3, 3)), 1, 1)


@pytest.mark.parametrize("op", ["conv2d", "conv2d_strided"])
def test_conv_gradients_finite_differences(op):
    assert tc.grad_check(op, [(2, 5, 5), (3, 2, 3, 3), (3,)], seed=0) < 1e-4


# --- pooling ------------------------------------------------------------------

def test_maxpool_constant_and_small_case():
    x = np.full((2, 5, 5), 3.0, dtype=np.float32)
    np.testing.assert_array_equal(tc.maxpool2d_forward(x, 3, 2), np.full((2, 2, 2), 3.0))
    assert tc.maxpool2d_forward(np.array([[[1, 2], [3, 4]]], np.float32), 2, 2).tolist() == [[[4]]]


def test_maxpool_matches_scan_oracle(rng):
    x = rng.standard_normal((3, 9, 9))
    want, _ = maxpool_scan(x, 3, 2)
    np.testing.assert_array_equal(tc.maxpool2d_forward(x, 3, 2), want)
    g = rng.standard_normal(want.shape)
    np.testing.assert_allclose(tc.maxpool2d_backward(g, x, 3, 2), maxpool_backward_scan(g, x, 3, 2))


def test_maxpool_ties_route_to_first_in_scan_order():
    x = np.ones((1, 2, 2))
    gx = tc.maxpool2d_backward(np.ones((1, 1, 1)), x, 2, 2)
    assert gx.tolist() == [[[1, 0], [0, 0]]]


def test_maxpool_kernel_too_large():
    with pytest.raises(ShapeError):
        tc.maxpool2d_forward(np.zeros((1, 2, 2)), 3, 2)


def test_global_avg_pool():
    assert tc.global_avg_pool_forward(np.full((2, 3, 3), 7.0)).tolist() == [7.0, 7.0]
    assert tc.global_avg_pool_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]])).tolist() == [2.5]
    g = tc.global_avg_pool_backward(np.array([8.0]), np.zeros((1, 2, 2)))
    assert g.tolist() == [[[2.0, 2.0], [2.0, 2.0]]]


# --- relu / dropout / concat / add ---------------------------------------------

def test_relu_values_and_gradient_at_zero():
    assert tc.relu_forward(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    x = np.array([0.5, 3.0])
    np.testing.assert_array_equal(tc.relu_forward(x), x)
    assert tc.relu_backward(np.ones(3), np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 1]


def test_dropout_identity_cases(rng):
    x = T(rng.standard_normal((4, 4)))
    np.testing.assert_array_equal(tc.dropout(x, 0.0, train=True, rng=rng).data, x.data)
    np.testing.assert_array_equal(tc.dropout(x, 0.5, train=False).data, x.data)


def test_dropout_statistics_and_scaling():
    x = T(np.ones(100_000))
    out = tc.dropout(x, 0.5, train=True, rng=np.random.default_rng(0)).data
    zero_frac = np.mean(out == 0)
    assert abs(zero_frac - 0.5) <= 0.01
    assert set(np.unique(out).tolist()) == {0.0, 2.0}


def test_dropout_deterministic_and_ratio_checked():
    x = T(np.ones(1000))
    a = tc.dropout(x, 0.3, train=True, rng=np.random.default_rng(7)).data
    b = tc.dropout(x, 0.3, train=True, rng=np.random.default_rng(7)).data
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ParameterError):
        tc.dropout(x, 1.0, train=True, rng=np.random.default_rng(0))


def test_concat_shape_and_split_identity(rng):
    a = T(rng.standard_normal((2, 3, 4)))
    b = T(rng.standard_normal((3, 3, 4)))
    out = tc.concat_channels(a, b)
    assert out.shape == (5, 3, 4)
    assert out.data[:2].tobytes() == a.data.tobytes()
    assert out.data[2:].tobytes() == b.data.tobytes()
    with pytest.raises(ShapeError):
        tc.concat_channels(a, T(np.zeros((1, 2, 4))))


def test_add_identity_commutative_and_checked(rng):
    a = T(rng.standard_normal((2, 3, 3)))
    b = T(rng.standard_normal((2, 3, 3)))
    assert tc.add_elementwise(a, T(np.zeros((2, 3, 3)))).data.tobytes() == a.data.tobytes()
    assert tc.add_elementwise(a, b).data.tobytes() == tc.add_elementwise(b, a).data.tobytes()
    with pytest.raises(ShapeError):
        tc.add_elementwise(a, T(np.zeros((2, 3, 4))))


def test_add_and_concat_backward_through_tape(rng):
    a = T(rng.standard_normal((2, 3, 3)))
    b = T(rng.standard_normal((2, 3, 3)))
    tape = tc.GradTape()
    s = tc.add_elementwise(a, b, tape=tape)
    c = tc.concat_channels(s, a, tape=tape)
    g = rng.standard_normal(c.shape)
    grads = tape.backward(c, g)
    np.testing.assert_allclose(grads[id(b)], g[:2])
    np.testing.assert_allclose(grads[id(a)], g[:2] + g[2:])


# --- softmax cross-entropy ------------------------------------------------------

def test_softmax_uniform_logits():
    loss, grad = tc.softmax_cross_entropy(np.zeros(4), 2)
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    assert abs(grad.sum()) < 1e-12


def test_softmax_matches_high_precision_oracle(rng):
    for _ in range(20):
        z = rng.standard_normal(7) * 5
        label = int(rng.integers(7))
        loss, grad = tc.softmax_cross_entropy(z, label)
        assert loss == pytest.approx(softmax_ce_mp(z, label), abs=1e-6)
        assert abs(grad.sum()) < 1e-6


def test_softmax_label_out_of_range():
    with pytest.raises(ParameterError):
        tc.softmax_cross_entropy(np.zeros(3), 3)


def test_softmax_batched_mean():
    z = np.array([[0.0, 0.0], [10.0, 0.0]])
    loss, grad = tc.softmax_cross_entropy(z, np.array([0, 0]))
    single = [tc.softmax_cross_entropy(z[i], 0)[0] for i in range(2)]
    assert loss == pytest.approx(np.mean(single))
    assert grad.shape == (2, 2)


# --- schedule and sgd -------------------------------------------------------------

def test_lr_schedule_endpoints():
    s = tc.LrSchedule(0.04, 100)
    assert s.lr(0) == 0.04
    assert s.lr(100) == 0
    assert s.lr(50) == pytest.approx(0.02)
    with pytest.raises(ParameterError):
        s.lr(101)


def test_sgd_step_update():
    p = {"w": T([1.0, 2.0])}
    out = tc.sgd_step(p, {"w": np.array([1.0, -1.0])}, tc.LrSchedule(0.5, 10), 0)
    np.testing.assert_allclose(out["w"].data, [0.5, 2.5])
    with pytest.raises(ParameterError):
        tc.sgd_step(p, {"w": np.zeros(2)}, tc.LrSchedule(0.5, 10), 11)


# --- tape ---------------------------------------------------------------------------

def test_tape_replays_each_record_once_in_reverse(rng):
    x = T(rng.standard_normal((2, 5, 5)))
    w = T(rng.standard_normal((3, 2, 3, 3)))
    tape = tc.GradTape()
    y = tc.conv2d(x, w, None, 1, 1, tape=tape)
    y = tc.relu(y, tape=tape)
    y = tc.maxpool2d(y, 3, 2, tape=tape)
    y = tc.global_avg_pool(y, tape=tape)
    visited = []
    tape.backward(y, np.ones(y.shape), visit=visited)
    assert visited == ["global_avg_pool", "maxpool2d", "relu", "conv2d"]


# --- gradient checks -------------------------------------------------------------

@pytest.mark.parametrize("op", sorted(tc.OPS))
def test_grad_check_every_op(op):
    assert tc.grad_check(op, seed=3) < 1e-4


def test_grad_check_linear_and_relu_tight():
    assert tc.grad_check("add_elementwise", seed=0) < 1e-8
    assert tc.grad_check("relu", seed=0) < 1e-6


def test_determinism_bitwise(rng):
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = tc.conv2d_forward(x, w, None, 1, 1)
    b = tc.conv2d_forward(x.copy(), w.copy(), None, 1, 1)
    assert a.tobytes() == b.tobytes()
