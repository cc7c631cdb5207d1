"""Straight-line reference of the backward pass for small dense networks.

Written with plain Python loops over spike-time lists and its own kernel
evaluation, sharing no code with the vectorised training path, so the two
can be checked against each other.
"""

import math


def _kernel(s, t, tau_m, tau_s):
    if s <= 0 or t <= 0:
        return 0.0
    m = min(s, t)
    lag = max(t - s, 0.0)
    return math.exp(-lag / tau_s) / (1.0 - tau_s / tau_m) * (math.exp(-m / tau_m) - math.exp(-m / tau_s))


def _spsp(pre_times, post_times, tau_m, tau_s):
    total = 0.0
    prev = 0.0
    for tf in post_times:
        for tp in pre_times:
            total += _kernel(tf - prev, tf - tp, tau_m, tau_s)
        prev = tf
    return total


def _ratio(num, den):
    return num / den if den > 0 else 0.0


def reference_gradients(weights, trains, params, targets, w0=None):
    """Gradients of ``0.5 * ||o - y||^2`` for a dense network.

    Parameters
    ----------
    weights : list of 2-D lists
        ``weights[k][i][j]`` connects neuron ``j`` of layer ``k`` to neuron
        ``i`` of layer ``k + 1``.
    trains : list of lists of spike-time sequences
        ``trains[k][i]`` are the firing times of neuron ``i`` of layer ``k``
        (layer 0 is the input).
    params : list of (tau_m, tau_s, threshold) per non-input layer.
    targets : desired output counts.
    w0 : lateral weight of the output layer, or None.

    Returns
    -------
    grads, deltas : lists indexed by non-input layer.
    """
    n_layers = len(weights)
    counts = [[len(tr) for tr in layer] for layer in trains]

    e = []
    for k in range(n_layers):
        tau_m, tau_s, _ = params[k]
        pre, post = trains[k], trains[k + 1]
        e.append([[_spsp(list(pre[j]), list(post[i]), tau_m, tau_s) for j in range(len(pre))]
                  for i in range(len(post))])

    deltas = [None] * n_layers
    out = n_layers - 1
    nu_out = params[out][2]
    deltas[out] = [(counts[-1][i] - targets[i]) / nu_out for i in range(len(targets))]
    for k in range(out - 1, -1, -1):
        nu = params[k][2]
        nxt = deltas[k + 1]
        row = []
        for i in range(len(trains[k + 1])):
            acc = 0.0
            for l in range(len(nxt)):
                acc += nxt[l] * weights[k + 1][l][i] * _ratio(e[k + 1][l][i], counts[k + 1][i])
            row.append(acc / nu)
        deltas[k] = row

    gamma = [1.0] * len(trains[-1])
    if w0 is not None:
        tau_m, tau_s, nu = params[out]
        outs = trains[-1]
        n = len(outs)
        lat = [[0.0 if i == l else _spsp(list(outs[l]), list(outs[i]), tau_m, tau_s)
                for l in range(n)] for i in range(n)]
        for i in range(n):
            acc = 0.0
            for l in range(n):
                if l != i:
                    acc += _ratio(lat[i][l], counts[-1][l]) * _ratio(lat[l][i], counts[-1][i])
            gamma[i] = 1.0 / (1.0 - (w0 * w0) / (nu * nu) * acc)

    grads = []
    for k in range(n_layers):
        nu = params[k][2]
        g = []
        for i in range(len(trains[k + 1])):
            o_i = counts[k + 1][i]
            corr = 0.0
            for l in range(len(trains[k])):
                corr += weights[k][i][l] * _ratio(e[k][i][l], o_i)
            factor = 1.0 + corr / nu
            gi = gamma[i] if k == out else 1.0
            g.append([deltas[k][i] * e[k][i][j] * factor * gi for j in range(len(trains[k]))])
        grads.append(g)
    return grads, deltas
