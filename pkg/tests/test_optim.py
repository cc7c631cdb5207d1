import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hm2bp.core import NumericalError
from hm2bp.optim import AdamState, adam_step, exp_weight_regularize, reweight_samples


def scalar_adam(grads, w, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-Python Adam on one scalar, written from the update rules."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def _step(w, g, state=None):
    state = state or AdamState.like([None, w])
    return adam_step(state, [None, g], [None, w])[1], state


def test_zero_gradient_leaves_weights():
    w = np.array([[0.3, -0.2]])
    new, _ = _step(w, np.zeros_like(w))
    assert np.array_equal(new, w)


def test_first_step_unit_gradient():
    new, st_ = _step(np.array([0.0]), np.array([1.0]))
    assert new[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert st_.t == 1


def test_identical_entries_identical_updates():
    new, _ = _step(np.array([0.5, 0.5]), np.array([0.3, 0.3]))
    assert new[0] == new[1]


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(-2, 2))
def test_matches_scalar_adam(gs, w0):
    w = np.array([w0])
    state = AdamState.like([w])
    for g in gs:
        w = adam_step(state, [np.array([g])], [w])[0]
    assert w[0] == pytest.approx(scalar_adam(gs, w0), rel=1e-10, abs=1e-13)


@given(st.floats(1e-3, 1e3))
def test_first_step_magnitude_is_lr(g):
    new, _ = _step(np.array([0.0]), np.array([g]))
    # closed-form first step: lr * |g| / (|g| + eps)
    assert abs(new[0]) == pytest.approx(1e-3 * g / (g + 1e-8), rel=1e-12)
    assert abs(new[0]) == pytest.approx(1e-3, rel=1e-5)


def test_deterministic(rng):
    w = rng.normal(size=(4, 5))
    gs = [rng.normal(size=(4, 5)) for _ in range(5)]
    outs = []
    for _ in range(2):
        state, cur = AdamState.like([w]), w
        for g in gs:
            cur = adam_step(state, [g], [cur])[0]
        outs.append(cur)
    assert np.array_equal(outs[0], outs[1])


def test_rejects_bad_gradients():
    with pytest.raises(NumericalError):
        _step(np.zeros(2), np.array([np.nan, 0.0]))
    with pytest.raises(ValueError):
        _step(np.zeros(2), np.zeros(3))


def test_regularizer_examples():
    w = np.array([1.0, -0.5, 0.0])
    assert np.all(exp_weight_regularize(w, 0.0, 1.0) == 0)
    r = exp_weight_regularize(w, 1e-5, 1.0)
    assert r[2] == 0.0
    assert r[0] == pytest.approx(1e-5 * math.e) and r[0] == pytest.approx(2.718e-5, abs=1e-8)
    with pytest.raises(ValueError):
        exp_weight_regularize(w, -1.0, 1.0)


@given(st.floats(-20, 20), st.floats(0, 1e-2), st.floats(0, 3))
def test_regularizer_odd(w, lam, beta):
    a = exp_weight_regularize(np.array([w]), lam, beta)[0]
    b = exp_weight_regularize(np.array([-w]), lam, beta)[0]
    assert a == -b


def test_reweight_examples():
    assert np.all(reweight_samples([True] * 5).values == 1.0)
    sw = reweight_samples([True, False, True], factor=2.0)
    assert list(sw.values) == [1.0, 2.0, 1.0] and sw[1] == 2.0
    assert reweight_samples([False], factor=10.0, cap=4.0)[0] == 4.0
    with pytest.raises(ValueError):
        reweight_samples([True], factor=0.5)
