import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rescnds import graph as G
from rescnds.errors import LabelError, NumericError, ParameterError, ScheduleError
from rescnds.supervision import (SupervisionSchedule, alpha_at, combined_loss, cross_entropy,
                                 softmax_prob, softmax_xent_backward)

logit_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
                    elements=st.floats(-50, 50))


def direct_softmax(z):
    out = np.zeros_like(z)
    for i, row in enumerate(z):
        e = [math.exp(v) for v in row]
        out[i] = [v / sum(e) for v in e]
    return out


def test_softmax_uniform():
    assert np.array_equal(softmax_prob(np.zeros((3, 5))), np.full((3, 5), 0.2))


def test_softmax_matches_direct_formula(rng):
    z = rng.normal(size=(2, 4))
    np.testing.assert_allclose(softmax_prob(z), direct_softmax(z), rtol=1e-14)


def test_softmax_large_logits_stable():
    p = softmax_prob(np.array([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_non_finite(bad):
    with pytest.raises(NumericError):
        softmax_prob(np.array([[0.0, bad]]))


def test_softmax_needs_two_classes():
    with pytest.raises(ParameterError):
        softmax_prob(np.zeros((2, 1)))


@settings(max_examples=80, deadline=None)
@given(logit_rows, st.floats(-100, 100))
def test_softmax_properties(z, c):
    p = softmax_prob(z)
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-10)
    np.testing.assert_allclose(softmax_prob(z + c), p, rtol=0, atol=1e-12)
    # argmax is preserved whenever the maximum is resolvably unique
    top = np.sort(z, axis=1)
    unique = top[:, -1] - top[:, -2] > 1e-9
    assert np.array_equal(p.argmax(axis=1)[unique], z.argmax(axis=1)[unique])


def test_xent_perfect_prediction():
    assert cross_entropy(np.eye(3), np.array([0, 1, 2])) == 0.0


def test_xent_uniform_205():
    k = 205
    value = cross_entropy(np.full((4, k), 1.0 / k), np.array([0, 7, 100, 204]))
    assert value == pytest.approx(math.log(205), abs=1e-12)
    assert round(value, 4) == 5.3230


def test_xent_direct_summation(rng):
    p = softmax_prob(rng.normal(size=(5, 4)))
    y = np.array([0, 3, 1, 1, 2])
    direct = -sum(math.log(p[i, y[i]]) for i in range(5)) / 5
    assert abs(cross_entropy(p, y) - direct) <= 1e-12


def test_xent_clamp():
    p = np.array([[1.0, 0.0]])
    assert cross_entropy(p, np.array([1])) == pytest.approx(-math.log(1e-12))


@pytest.mark.parametrize("labels", [[3], [-1], [0.5]])
def test_xent_bad_labels(labels):
    with pytest.raises(LabelError):
        cross_entropy(np.full((1, 3), 1 / 3), np.array(labels))


@settings(max_examples=60, deadline=None)
@given(logit_rows, st.data())
def test_xent_non_negative(z, data):
    y = np.array(data.draw(st.lists(st.integers(0, z.shape[1] - 1), min_size=z.shape[0],
                                    max_size=z.shape[0])))
    assert cross_entropy(softmax_prob(z), y) >= 0


def test_xent_backward_rows_sum_to_zero(rng):
    g = softmax_xent_backward(rng.normal(size=(6, 5)), np.array([0, 1, 2, 3, 4, 0]))
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-15)


def test_xent_backward_finite_differences(rng):
    z = rng.normal(size=(2, 4))
    y = np.array([1, 3])
    g = softmax_xent_backward(z, y)
    eps = 1e-5
    num = np.zeros_like(z)
    for i in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[i] += eps
        zm[i] -= eps
        num[i] = (cross_entropy(softmax_prob(zp), y) - cross_entropy(softmax_prob(zm), y)) / (2 * eps)
    assert np.max(np.abs(g - num) / np.maximum(np.abs(g), np.abs(num))) < 1e-6


def test_xent_backward_saturates():
    z = np.array([[60.0, 0.0, 0.0]])
    assert np.abs(softmax_xent_backward(z, np.array([0]))).max() < 1e-20


# -- schedule ---------------------------------------------------------------

def test_alpha_examples():
    s = SupervisionSchedule(0.3, 50)
    assert alpha_at(s, 0) == 0.3
    assert alpha_at(s, 50) == 0.0
    assert alpha_at(s, 25) == pytest.approx(0.15, abs=1e-15)
    r = SupervisionSchedule(0.3, 50, "recursive")
    assert alpha_at(r, 0) == 0.3
    assert alpha_at(r, 2) == pytest.approx(0.3 * (1 - 1 / 50) * (1 - 2 / 50), abs=1e-15)
    assert alpha_at(r, 50) == 0.0


@pytest.mark.parametrize("t", [-1, 51])
def test_alpha_out_of_range(t):
    with pytest.raises(ScheduleError):
        alpha_at(SupervisionSchedule(0.3, 50), t)


@pytest.mark.parametrize("kw", [dict(alpha0=-0.1), dict(total_epochs=0), dict(decay="cosine")])
def test_schedule_validation(kw):
    with pytest.raises(ParameterError):
        SupervisionSchedule(**kw)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 5), st.integers(1, 80), st.sampled_from(["closed", "recursive"]))
def test_alpha_non_increasing(a0, n, decay):
    s = SupervisionSchedule(a0, n, decay)
    vals = [alpha_at(s, t) for t in range(n + 1)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert vals[0] == a0
    if decay == "closed":
        assert vals[-1] == 0.0
    assert all(v >= 0 for v in vals)


def test_combined_examples():
    assert combined_loss(2.0, 1.0, 0.3) == pytest.approx(2.3, abs=1e-12)
    assert combined_loss(1.7, 123.0, 0.0) == 1.7
    with pytest.raises(ParameterError):
        combined_loss(1.0, 1.0, -0.01)


@settings(max_examples=60)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 1), st.floats(0, 1))
def test_combined_linear_in_alpha(lo, ls, a, b):
    if abs(a - b) < 1e-3:
        return
    slope = (combined_loss(lo, ls, a) - combined_loss(lo, ls, b)) / (a - b)
    assert slope == pytest.approx(ls, rel=1e-6, abs=1e-6)


def test_combined_gradient_is_weighted_sum(desk_graph, rng):
    x = rng.normal(size=(3, 3, 32, 32))
    y = np.array([1, 0, 2])
    alpha = 0.27
    logits, state = G.forward(desk_graph, x, "train", 11)
    gm = softmax_xent_backward(logits["output"], y)
    gs = softmax_xent_backward(logits["s_output"], y)
    combined = G.backward(desk_graph, state, {"output": gm, "s_output": alpha * gs})
    main = G.backward(desk_graph, state, {"output": gm})
    aux = G.backward(desk_graph, state, {"s_output": gs})
    for nid in ("conv1", "conv2", "conv3_1"):
        expect = main[nid].weights + alpha * aux[nid].weights
        np.testing.assert_allclose(combined[nid].weights, expect, rtol=1e-10, atol=1e-18)
        assert aux[nid].weights.any()
