import numpy as np
import pytest
from hypothesis import given, strategies as st

from hm2bp.core import (ConfigError, LayerSpec, Network, NeuronParams, NumericalError, TimeGrid,
                        dense_network)
from hm2bp.grad import (backward_pass, conv_gradient_fold, hidden_delta, lateral_gamma, loss,
                        micro_dadw, output_delta, weight_gradient)
from hm2bp.io import parse_network
from hm2bp.lif import INDEX_CACHE, forward_pass, raster_to_trains
from hm2bp.reference import reference_gradients
from hm2bp.spsp import SpsPTable

from oracles import conv_untied_gradient

GRID = TimeGrid(200.0, 1.0)


def test_output_delta_examples():
    assert output_delta([3], [5], 10.0)[0] == pytest.approx(-0.2)
    assert np.all(output_delta([4, 9], [4, 9], 10.0) == 0)
    assert np.allclose(output_delta([7, 0], [5, 2], 5.0), [0.4, -0.4])


def test_hidden_delta_examples():
    assert hidden_delta([1.0], [[2.0]], [[4.0]], [2.0], 10.0)[0] == pytest.approx(0.4)
    assert np.all(hidden_delta([0.0, 0.0], np.ones((2, 3)), np.ones((2, 3)), [1, 2, 3], 10) == 0)
    d = hidden_delta([0.5, -0.5], [[1.0], [1.0]], [[3.0], [3.0]], [2.0], 10.0)
    assert d[0] == 0.0
    # neuron that never fired gets no error
    assert hidden_delta([1.0], [[2.0, 2.0]], [[4.0, 0.0]], [2.0, 0.0], 10.0)[1] == 0.0
    with pytest.raises(ConfigError):
        hidden_delta([1.0], [[1.0, 2.0]], [[1.0]], [1.0], 10.0)


def test_micro_dadw_examples():
    # sum_l w_il * e_il / o_i = 2  ->  5 * (1 + 0.2)
    assert micro_dadw(5.0, [1.0, 1.0], [2.0, 2.0], 2.0, 10.0) == pytest.approx(6.0)
    assert micro_dadw(0.0, [1.0], [3.0], 1.0, 10.0) == 0.0
    assert micro_dadw(3.0, [1.0], [3.0], 1.0, 10.0) == pytest.approx(3.9)
    # silent post neuron: correction vanishes
    assert micro_dadw(3.0, [1.0], [3.0], 0.0, 10.0) == 3.0


def test_lateral_gamma_examples():
    e = np.array([[0.0, 4.0], [4.0, 0.0]])
    o = np.array([2.0, 2.0])
    assert np.array_equal(lateral_gamma(0.0, 10.0, e, o), [1.0, 1.0])
    assert np.array_equal(lateral_gamma(-1.0, 10.0, np.zeros((2, 2)), [0.0, 0.0]), [1.0, 1.0])
    # e/o = 2 both ways: the sum is 4, scaled by (w0/nu)^2
    assert np.allclose(lateral_gamma(1.0, 10.0, e, o), 1 / (1 - 0.01 * 4))
    assert lateral_gamma(2.0, 10.0, e, o)[0] == pytest.approx(1.1905, abs=1e-4)
    assert np.allclose(lateral_gamma(-2.0, 10.0, e, o), 1 / 0.84)


def test_lateral_gamma_degenerate_raises():
    e = np.array([[0.0, 20.0], [20.0, 0.0]])
    with pytest.raises(NumericalError):
        lateral_gamma(1.0, 10.0, e, [2.0, 2.0])


def _table(rng, n_post=3, n_pre=4):
    e = rng.uniform(0, 5, (n_post, n_pre))
    w = rng.uniform(-1, 1, (n_post, n_pre))
    o_post = rng.integers(0, 5, n_post).astype(float)
    e[o_post == 0] = 0.0
    return SpsPTable("dense", e, rng.integers(1, 9, n_pre).astype(float), o_post,
                     np.einsum("ij,ij->i", w, e)), w


def test_weight_gradient_examples(rng):
    tab, w = _table(rng)
    assert np.all(weight_gradient(np.zeros(3), tab, 10.0) == 0)
    one = SpsPTable("dense", np.array([[3.0]]), np.array([2.0]), np.array([1.0]), np.array([3.0]))
    # delta * e * (1 + a / (nu o))
    assert weight_gradient(np.array([0.5]), one, 10.0)[0, 0] == pytest.approx(0.5 * 3.0 * 1.3)


@given(st.floats(-10, 10))
def test_weight_gradient_linear_in_delta(lam):
    rng = np.random.default_rng(1)
    tab, _ = _table(rng)
    d = rng.normal(size=3)
    assert np.allclose(weight_gradient(lam * d, tab, 10.0), lam * weight_gradient(d, tab, 10.0),
                       rtol=1e-12, atol=1e-12)


def test_conv_fold_examples():
    g = np.arange(6.0).reshape(1, 1, 6)
    assert np.array_equal(conv_gradient_fold(g, (1, 1, 1, 6)).ravel(), g.ravel())
    g = np.array([[[1.5], [2.25]]])
    assert conv_gradient_fold(g, (1, 1, 1, 1))[0, 0, 0, 0] == 3.75
    with pytest.raises(ConfigError):
        conv_gradient_fold(np.zeros((2, 3, 4)), (2, 1, 3, 3))


def _dense_twin_of_conv(net, i):
    """Weight matrix of conv layer ``i`` written as an untied dense layer."""
    spec = net.layers[i]
    idx = INDEX_CACHE.conv(net.shapes[i - 1], spec.kernel)
    P, Q = idx.shape
    kern = net.weights[i].reshape(spec.size, Q)
    w = np.zeros((spec.size * P, net.size(i - 1)))
    for c in range(spec.size):
        for p in range(P):
            for q in range(Q):
                w[c * P + p, idx[p, q]] = kern[c, q]
    return w, idx


def test_conv_gradient_equals_tied_dense_twin():
    rng = np.random.default_rng(4)
    checked = 0
    for trial in range(20):
        net = parse_network("input shape=1x3x3\nconv channels=2 kernel=2 threshold=5\n"
                            "dense n=2 threshold=10\n", 1.0)
        net.weights[1] = rng.uniform(0.5, 4.0, (2, 1, 2, 2))
        net.weights[2] = rng.uniform(0.0, 3.0, (2, 8))
        inp = (rng.random((200, 9)) < 0.3).astype(float)
        y = np.array([30.0, 2.0])
        fwd = forward_pass(net, inp, GRID)
        g = backward_pass(net, fwd, y, lateral=False)

        w_full, idx = _dense_twin_of_conv(net, 1)
        twin = dense_network([9, 8, 2], [net.params(1), net.params(2)])
        twin.weights[1], twin.weights[2] = w_full, net.weights[2].copy()
        tf = forward_pass(twin, inp, GRID)
        assert np.array_equal(tf.counts[1], fwd.counts[1])
        tg = backward_pass(twin, tf, y, lateral=False)
        assert np.allclose(tg.deltas[1], g.deltas[1], rtol=1e-12, atol=1e-14)

        # untied gradient from the oracle formula, then tie by summing shared entries
        tab = tf.tables[1]
        untied = conv_untied_gradient(tg.deltas[1], tab.e, tab.a, tab.o_post, net.params(1).threshold)
        tied = np.zeros((2, 4))
        P, Q = idx.shape
        for c in range(2):
            for p in range(P):
                for q in range(Q):
                    tied[c, q] += untied[c * P + p, idx[p, q]]
        assert np.allclose(g.grads[1].reshape(2, 4), tied, rtol=1e-10, atol=1e-13)
        checked += int(np.any(tied != 0))
    assert checked >= 10


def test_pool_delta_uses_hidden_rule():
    rng = np.random.default_rng(8)
    net = parse_network("input shape=1x4x4\npool threshold=2\ndense n=2 threshold=10\n", 1.0)
    net.weights[2] = rng.uniform(0.5, 3.0, (2, 4))
    inp = (rng.random((200, 16)) < 0.5).astype(float)
    fwd = forward_pass(net, inp, GRID)
    assert np.any(fwd.counts[1] > 0)
    g = backward_pass(net, fwd, np.array([25.0, 3.0]))
    # pool deltas: hidden rule with this layer's own threshold
    expected = hidden_delta(g.deltas[2], net.weights[2], fwd.tables[2].e, fwd.counts[1], 2.0)
    assert np.allclose(g.deltas[1], expected, rtol=1e-12)


def test_backward_zero_error_zero_bundle(rng):
    net = dense_network([6, 4, 3], [NeuronParams(), NeuronParams(threshold=20)], rng=rng)
    net.weights[1] = np.abs(net.weights[1]) * 3
    net.weights[2] = np.abs(net.weights[2]) * 3
    fwd = forward_pass(net, (rng.random((200, 6)) < 0.3).astype(float), GRID)
    g = backward_pass(net, fwd, fwd.output_counts.copy())
    assert all(np.all(x == 0) for x in g.grads if x is not None)
    assert g.grads[1].shape == net.weights[1].shape and g.grads[2].shape == net.weights[2].shape


def test_silent_input_gets_zero_gradient(rng):
    net = dense_network([6, 4], [NeuronParams()])
    net.weights[1] = rng.uniform(0.5, 3, (4, 6))
    inp = (rng.random((200, 6)) < 0.3).astype(float)
    inp[:, 2] = 0.0
    fwd = forward_pass(net, inp, GRID)
    g = backward_pass(net, fwd, np.full(4, 30.0))
    assert np.all(g.grads[1][:, 2] == 0.0)
    assert np.any(g.grads[1] != 0.0)


def test_sample_weight_scales_bundle(rng):
    net = dense_network([6, 4, 3], [NeuronParams(), NeuronParams(threshold=20)], rng=rng)
    net.weights[1] = np.abs(net.weights[1]) * 3
    net.weights[2] = np.abs(net.weights[2]) * 3
    fwd = forward_pass(net, (rng.random((200, 6)) < 0.3).astype(float), GRID)
    y = np.array([35.0, 5.0, 5.0])
    g1 = backward_pass(net, fwd, y)
    g2 = backward_pass(net, fwd, y, sample_weight=2.0)
    for a, b in zip(g1.grads, g2.grads):
        if a is not None:
            assert np.array_equal(2.0 * a, b)


def test_transcript_2_2_2():
    net = dense_network([2, 2, 2], [NeuronParams(64, 8, 6.0), NeuronParams(64, 8, 8.0)],
                        lateral_w0=-0.5)
    net.weights[1] = np.array([[3.0, 2.0], [1.5, 3.5]])
    net.weights[2] = np.array([[2.5, 1.0], [0.5, 3.0]])
    rng = np.random.default_rng(0)
    inp = (rng.random((200, 2)) < 0.3).astype(float)
    fwd = forward_pass(net, inp, GRID)
    assert np.all(fwd.counts[1] > 0) and np.all(fwd.counts[2] > 0)
    y = np.array([20.0, 3.0])
    prod = backward_pass(net, fwd, y)
    trains = [[list(t.times) for t in raster_to_trains(r, 1.0)] for r in fwd.rasters]
    ref, ref_d = reference_gradients([net.weights[1].tolist(), net.weights[2].tolist()], trains,
                                     [(64, 8, 6.0), (64, 8, 8.0)], list(y), -0.5)
    for k, i in enumerate((1, 2)):
        assert np.allclose(prod.grads[i], ref[k], rtol=1e-10, atol=0)
        assert np.allclose(prod.deltas[i], ref_d[k], rtol=1e-10, atol=0)


def test_w0_zero_matches_plain_path_bitwise(rng):
    base = dense_network([5, 3, 3], [NeuronParams(), NeuronParams(threshold=8)])
    base.weights[1] = rng.uniform(0, 3, (3, 5))
    base.weights[2] = rng.uniform(0, 3, (3, 3))
    zero = Network([base.layers[0], base.layers[1],
                    LayerSpec("dense", size=3, params=base.layers[2].params, lateral_w0=0.0)],
                   [None, base.weights[1], base.weights[2]])
    inp = (rng.random((200, 5)) < 0.3).astype(float)
    y = np.array([20.0, 2.0, 2.0])
    a = backward_pass(base, forward_pass(base, inp, GRID), y)
    b = backward_pass(zero, forward_pass(zero, inp, GRID), y)
    for x, z in zip(a.grads, b.grads):
        assert (x is None and z is None) or np.array_equal(x, z)


def test_descent_small_sample():
    from hm2bp.verify import descent_trial
    res = [descent_trial(s) for s in range(10)]
    assert np.mean([after < before for before, after in res]) >= 0.8


def test_loss():
    assert loss([3, 4], [0, 0]) == 12.5
