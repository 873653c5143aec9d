import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cass import tensor as T
from gradcases import CASES, worst_error


# -- conv2d ------------------------------------------------------------------

def test_conv2d_scalar_scaling():
    x = np.full((1, 1, 2, 2), 3.0)
    out, _ = T.conv2d(x, np.full((1, 1, 1, 1), 2.0))
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 6.0))


def test_conv2d_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    out, _ = T.conv2d(x, k, padding=1)
    np.testing.assert_array_equal(out, x)


def test_conv2d_output_shape():
    x = np.zeros((2, 4, 7, 9))
    out, _ = T.conv2d(x, np.zeros((6, 2, 3, 3)), stride=2, padding=1, groups=2)
    assert out.shape == (2, 6, 4, 5)


def test_conv2d_grouped_weight_gradient():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 5, 5))
    w = rng.standard_normal((4, 2, 3, 3))
    out, cache = T.conv2d(x, w, None, 1, 1, groups=2)
    r = rng.standard_normal(out.shape)
    _, dw, _ = T.conv2d_backward(r, cache)
    from gradcheck import numeric_grad, rel_error
    num = numeric_grad(lambda: float((T.conv2d(x, w, None, 1, 1, 2)[0] * r).sum()), w)
    assert rel_error(dw, num) < 1e-6


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 6, 5))
    w = rng.standard_normal((6, 2, 3, 3))
    b = rng.standard_normal(6)
    out, _ = T.conv2d(x, w, b, stride=2, padding=1, groups=2)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n, o, i, j in itertools.product(*map(range, out.shape)):
        g = o // 3
        patch = xp[n, 2 * g:2 * g + 2, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
        ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kw", [
    dict(x=(1, 3, 4, 4), w=(2, 2, 3, 3), groups=1),
    dict(x=(1, 4, 4, 4), w=(3, 2, 3, 3), groups=2),
    dict(x=(1, 1, 2, 2), w=(1, 1, 3, 3), groups=1),
])
def test_conv2d_dimension_errors(kw):
    with pytest.raises(T.DimensionError):
        T.conv2d(np.zeros(kw["x"]), np.zeros(kw["w"]), groups=kw["groups"])


# -- depthwise ---------------------------------------------------------------

def test_depthwise_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 4))
    k = np.zeros((3, 1, 3, 3))
    k[:, 0, 1, 1] = 1
    out, _ = T.depthwise_conv2d(x, k, 1, 1)
    np.testing.assert_array_equal(out, x)


def test_depthwise_channel_independence():
    x = np.arange(8.0).reshape(1, 2, 2, 2) + 1
    k = np.ones((2, 1, 1, 1))
    k[0] = 0
    out, _ = T.depthwise_conv2d(x, k)
    assert np.all(out[0, 0] == 0)
    np.testing.assert_array_equal(out[0, 1], x[0, 1])


def test_depthwise_channel_mismatch():
    with pytest.raises(T.DimensionError):
        T.depthwise_conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 1, 3, 3)))


# -- batch norm ----------------------------------------------------------------

def test_batch_norm_train_standardises():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3, 5, 5)) * 7 + 2
    rm, rv = np.zeros(3), np.ones(3)
    out, _ = T.batch_norm(x, np.ones(3), np.zeros(3), rm, rv, train=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-6)
    m = 4 * 25
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batch_norm_eval_closed_form():
    eps = 1e-5
    out, _ = T.batch_norm(np.ones((1, 1, 1, 1)), np.array([2.0]), np.array([3.0]),
                          np.zeros(1), np.ones(1), train=False, eps=eps)
    assert out.item() == pytest.approx(2 / np.sqrt(1 + eps) + 3, abs=1e-12)


def test_batch_norm_degenerate_batch():
    with pytest.raises(T.DegenerateBatchError):
        T.batch_norm(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2),
                     np.zeros(2), np.ones(2), train=True)


# -- channel plumbing -----------------------------------------------------------

def _labelled(c):
    return np.arange(c, dtype=float).reshape(1, c, 1, 1)


def test_shuffle_groups_one_is_identity():
    x = _labelled(6)
    np.testing.assert_array_equal(T.channel_shuffle(x, 1), x)


def test_shuffle_c6_g2_order():
    # reshape(g, C/g) -> transpose -> flatten, done by hand
    order = np.arange(6).reshape(2, 3).T.ravel()
    assert order.tolist() == [0, 3, 1, 4, 2, 5]
    assert T.channel_shuffle(_labelled(6), 2).ravel().tolist() == order.tolist()


def test_shuffle_index_law():
    c, g = 12, 3
    out = T.channel_shuffle(_labelled(c), g).ravel()
    for k in range(g):
        for j in range(c // g):
            assert out[j * g + k] == k * (c // g) + j


def test_shuffle_not_divisible():
    with pytest.raises(T.DimensionError):
        T.channel_shuffle(_labelled(5), 2)


def test_split_and_concat():
    x = _labelled(4)
    a, b = T.channel_split(x)
    assert a.ravel().tolist() == [0, 1] and b.ravel().tolist() == [2, 3]
    rng = np.random.default_rng(0)
    y = rng.standard_normal((2, 6, 3, 3))
    np.testing.assert_array_equal(T.concat_channels(*T.channel_split(y)), y)
    with pytest.raises(T.DimensionError):
        T.channel_split(_labelled(3))


def test_concat_backward_routes_exactly():
    d = np.random.default_rng(0).standard_normal((2, 5, 2, 2))
    a, b = T.concat_channels_backward(d, 2)
    np.testing.assert_array_equal(a, d[:, :2])
    np.testing.assert_array_equal(b, d[:, 2:])


# -- pointwise / pooling / dense -------------------------------------------------

def test_relu_values():
    out, _ = T.relu(np.array([-1.0, 0.0, 2.0]).reshape(1, 3, 1, 1))
    assert out.ravel().tolist() == [0, 0, 2]


def test_global_avg_pool_constant():
    out, _ = T.global_avg_pool(np.full((2, 3, 4, 5), 1.75))
    assert out.shape == (2, 3, 1, 1)
    np.testing.assert_array_equal(out, 1.75)


def test_max_pool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out, _ = T.max_pool(x, 2, 2)
    assert out.ravel().tolist() == [5, 7, 13, 15]
    out, _ = T.max_pool(x, 3, 2, padding=1)
    assert out.ravel().tolist() == [5, 7, 13, 15]


def test_linear_shape_error():
    with pytest.raises(T.DimensionError):
        T.linear(np.zeros((2, 3)), np.zeros((4, 5)))


# -- softmax cross-entropy ------------------------------------------------------

def test_uniform_logits():
    loss, probs, _ = T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 2]))
    np.testing.assert_allclose(probs, 1 / 3)
    assert loss == pytest.approx(np.log(3), abs=1e-12)


def test_saturated_true_class():
    logits = np.zeros((1, 3))
    logits[0, 1] = 1000
    loss, probs, d = T.softmax_cross_entropy(logits, np.array([1]))
    assert loss == pytest.approx(0, abs=1e-12)
    np.testing.assert_allclose(d, 0, atol=1e-12)


def test_label_out_of_range():
    with pytest.raises(T.LabelError):
        T.softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


# -- gradient checks (a few seeds; the acceptance suite runs 100) -----------------

GRAD_TOL = {"batch_norm": 1e-5}


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", range(4))
def test_gradient(name, seed):
    if name in ("basic_block", "downsample_block"):
        tol = 1e-4
    else:
        tol = GRAD_TOL.get(name, 1e-6)
    assert worst_error(CASES[name](seed)) < tol


# -- properties ------------------------------------------------------------------

finite = st.floats(-1e6, 1e6, allow_nan=False, width=64)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (2, 4, 3, 3), elements=finite))
def test_no_nonfinite_from_finite(x):
    w = np.full((4, 2, 3, 3), 0.5)
    ops = [
        T.conv2d(x, w, None, 1, 1, 2)[0],
        T.depthwise_conv2d(x, np.ones((4, 1, 3, 3)), 1, 1)[0],
        T.batch_norm(x, np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), True)[0],
        T.max_pool(x, 3, 2, 1)[0],
        T.global_avg_pool(x)[0],
        T.relu(x)[0],
    ]
    loss, probs, d = T.softmax_cross_entropy(x.reshape(2, -1), np.array([0, 5]))
    for o in ops + [probs, d]:
        assert np.all(np.isfinite(o))
    assert np.isfinite(loss) and loss >= 0


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(logits):
    loss, probs, _ = T.softmax_cross_entropy(logits, np.array([0, 1, 4]))
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-9)
    assert loss >= 0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_plumbing_preserves_values(g, per, seed):
    c = g * per * 2
    x = np.random.default_rng(seed).standard_normal((1, c, 2, 2))
    for y in (T.channel_shuffle(x, g), T.concat_channels(*T.channel_split(x))):
        np.testing.assert_array_equal(np.sort(y, axis=None), np.sort(x, axis=None))
