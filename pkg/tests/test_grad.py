import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advtrack import grad as G
import advtrack.attacks  # noqa: F401  registers the attack-loss ops


def xcorr_loops(search, kernel):
    C, H, W = search.shape
    _, h, w = kernel.shape
    out = np.zeros((H - h + 1, W - w + 1))
    for y in range(H - h + 1):
        for x in range(W - w + 1):
            s = 0.0
            for c in range(C):
                for i in range(h):
                    for j in range(w):
                        s += search[c, y + i, x + j] * kernel[c, i, j]
            out[y, x] = s
    return out


def attention_loops(q, k, v):
    out = np.zeros((q.shape[0], v.shape[1]))
    for a in range(q.shape[0]):
        logits = [float(q[a] @ k[b]) / np.sqrt(q.shape[1]) for b in range(k.shape[0])]
        m = max(logits)
        e = [np.exp(l - m) for l in logits]
        z = sum(e)
        for b in range(k.shape[0]):
            out[a] += e[b] / z * v[b]
    return out


# -- xcorr2d ------------------------------------------------------------------


def test_xcorr_scalar_kernel():
    out = G.xcorr2d(np.ones((1, 3, 3)), np.full((1, 1, 1), 2.0))
    assert out.shape == (3, 3) and np.all(out == 2.0)


def test_xcorr_autocorrelation_peak():
    k = np.random.default_rng(0).normal(size=(2, 3, 3))
    out = G.xcorr2d(k, k)
    assert out.shape == (1, 1)
    assert out[0, 0] == pytest.approx(np.sum(k * k), rel=1e-15)


def test_xcorr_matches_loops_random():
    r = np.random.default_rng(1)
    s, k = r.normal(size=(1, 4, 4)), r.normal(size=(1, 2, 2))
    np.testing.assert_allclose(G.xcorr2d(s, k), xcorr_loops(s, k), rtol=1e-13, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 8), st.integers(1, 8), st.data())
def test_xcorr_exact_on_integer_grids(C, H, W, data):
    # integer-valued operands make every partial sum exact, so any order agrees bit for bit
    h = data.draw(st.integers(1, H))
    w = data.draw(st.integers(1, W))
    ints = st.integers(-50, 50).map(float)
    s = data.draw(arrays(np.float64, (C, H, W), elements=ints))
    k = data.draw(arrays(np.float64, (C, h, w), elements=ints))
    assert np.array_equal(G.xcorr2d(s, k), xcorr_loops(s, k))


def test_xcorr_shape_errors():
    with pytest.raises(G.DimensionError):
        G.xcorr2d(np.ones((2, 4, 4)), np.ones((1, 2, 2)))
    with pytest.raises(G.DimensionError):
        G.xcorr2d(np.ones((1, 2, 2)), np.ones((1, 3, 3)))


# -- softmax ------------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(G.softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], rtol=1e-15)
    sat = G.softmax_rows(np.array([[1000.0, 0.0]]))
    assert sat[0, 0] == pytest.approx(1.0) and sat[0, 1] == pytest.approx(0.0, abs=1e-300)
    np.testing.assert_allclose(G.softmax_rows(np.array([[0.0, np.log(2.0)]])), [[1 / 3, 2 / 3]], rtol=1e-14)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(G.softmax_rows(x).sum(axis=1), 1.0, atol=1e-12)


# -- attention ----------------------------------------------------------------


@given(arrays(np.float64, (3, 4), elements=st.floats(-100, 100)),
       arrays(np.float64, (1, 4), elements=st.floats(-100, 100)),
       arrays(np.float64, (1, 5), elements=st.floats(-100, 100)))
def test_attention_single_key_returns_value(q, k, v):
    assert np.array_equal(G.attention(q, k, v), np.repeat(v, 3, axis=0))


def test_attention_identical_keys_average_values():
    a, b = np.array([1.0, 2.0]), np.array([3.0, -2.0])
    out = G.attention(np.array([[0.3, -1.0]]), np.array([[1.0, 1.0], [1.0, 1.0]]), np.stack([a, b]))
    np.testing.assert_allclose(out[0], (a + b) / 2, rtol=1e-15)


def test_attention_two_by_two_hand_case():
    q = np.array([[1.0], [0.0]])
    k = np.array([[1.0], [-1.0]])
    v = np.array([[2.0], [4.0]])
    e = np.exp(1.0), np.exp(-1.0)
    w0 = e[0] / (e[0] + e[1])
    expected = np.array([[w0 * 2 + (1 - w0) * 4], [3.0]])
    np.testing.assert_allclose(G.attention(q, k, v), expected, rtol=1e-14)
    np.testing.assert_allclose(G.attention(q, k, v), attention_loops(q, k, v), rtol=1e-14)


# -- multihead ----------------------------------------------------------------


def test_multihead_one_head_identity_is_attention():
    r = np.random.default_rng(2)
    q, k, v = r.normal(size=(3, 4)), r.normal(size=(5, 4)), r.normal(size=(5, 4))
    np.testing.assert_allclose(G.multihead(q, k, v, 1, G.Projections.identity(4)), G.attention(q, k, v),
                               rtol=1e-14, atol=1e-15)


def test_multihead_two_heads_split_into_independent_attentions():
    r = np.random.default_rng(3)
    q, k, v = r.normal(size=(3, 6)), r.normal(size=(4, 6)), r.normal(size=(4, 6))
    out = G.multihead(q, k, v, 2, G.Projections.identity(6))
    np.testing.assert_allclose(out[:, :3], attention_loops(q[:, :3], k[:, :3], v[:, :3]), rtol=1e-13)
    np.testing.assert_allclose(out[:, 3:], attention_loops(q[:, 3:], k[:, 3:], v[:, 3:]), rtol=1e-13)


def test_multihead_zero_values_give_zero():
    r = np.random.default_rng(4)
    proj = G.Projections.random(4, r)
    assert np.all(G.multihead(r.normal(size=(2, 4)), r.normal(size=(3, 4)), np.zeros((3, 4)), 2, proj) == 0)


def test_multihead_rejects_indivisible_heads():
    with pytest.raises(G.ConfigurationError):
        G.multihead(np.ones((1, 5)), np.ones((1, 5)), np.ones((1, 5)), 2, G.Projections.identity(5))


# -- grad_check ---------------------------------------------------------------


def test_softmax_passes_grad_check():
    rep = G.grad_check("softmax_rows", step=1e-5, tol=1e-4, seed=7)
    assert rep.passed and rep.max_rel_error < 1e-6


def test_negated_attention_backward_fails_with_error_two():
    op = G.get_op("attention")
    bad = dataclasses.replace(op, name="attention_negated",
                              backward=lambda g, *x: tuple(-a for a in op.backward(g, *x)))
    rep = G.grad_check(bad, seed=0)
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(2.0, rel=1e-4)


def test_constant_function_has_zero_gradient():
    op = G.Op("const", lambda x: np.array(3.0), lambda g, x: (np.zeros_like(x),),
              lambda r: (r.normal(size=5),))
    rep = G.grad_check(op)
    assert rep.passed and rep.max_rel_error == 0.0


def test_grad_check_validates_step_and_shapes():
    with pytest.raises(ValueError):
        G.grad_check("relu", step=0.0)
    op = G.Op("bad_shape", lambda x: x, lambda g, x: (np.zeros(3),), lambda r: (r.normal(size=4),))
    with pytest.raises(G.DimensionError):
        G.grad_check(op)
    with pytest.raises(G.UnknownOpError):
        G.get_op("no_such_op")


@pytest.mark.parametrize("name", sorted(n for n in G.REGISTRY if not n.startswith("siamcorr_")))
def test_registered_op_passes_at_five_points(name):
    for r in G.check_all(range(5), names=[name]):
        assert r.passed, (name, r.max_rel_error)


def test_backward_of_conv_and_pool_match_finite_differences_in_bulk():
    r = np.random.default_rng(5)
    x, w, b = r.normal(size=(2, 7, 7)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)
    rep = G.grad_check(G.get_op("conv2d"), (x, w, b), max_coords=None)
    assert rep.passed and rep.coords_checked == x.size + w.size + b.size
