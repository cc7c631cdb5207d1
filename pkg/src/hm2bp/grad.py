"""Backward pass through firing counts and spike-train PSPs.

Errors travel between layers through firing counts (macro level) and into
the weights through the S-PSPs and their dependence on the post-synaptic
firing count (micro level).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import POOL_WEIGHT, ConfigError, Network, NumericalError
from .lif import INDEX_CACHE, ForwardResult
from .spsp import SpsPTable

log = logging.getLogger(__name__)

GAMMA_EPS = 1e-6


@dataclass
class GradientBundle:
    """Per-layer ``dE/dw`` (``None`` for layers without weights) and deltas."""

    grads: list
    deltas: list

    def scaled(self, factor: float) -> "GradientBundle":
        return GradientBundle([None if g is None else g * factor for g in self.grads],
                              [None if d is None else d * factor for d in self.deltas])

    def norms(self) -> dict:
        return {
            "grad": [None if g is None else float(np.linalg.norm(g)) for g in self.grads],
            "delta": [None if d is None else float(np.linalg.norm(d)) for d in self.deltas],
        }


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def output_delta(o, y, nu: float) -> np.ndarray:
    """Macro-level error at the output: ``(o - y) / nu``."""
    o = np.asarray(o, dtype=float)
    y = np.asarray(y, dtype=float)
    if o.shape != y.shape:
        raise ValueError(f"count/target shape mismatch {o.shape} vs {y.shape}")
    return (o - y) / nu


def hidden_delta(next_delta, next_weights, next_e, o, nu: float) -> np.ndarray:
    """Macro-level error of a fully connected hidden layer.

    ``delta_i = (1/nu) sum_l next_delta_l * w_li * e_li / o_i``, with
    ``e_li / o_i`` the decoupled estimate of d e_li / d o_i (0 when o_i = 0).

    Parameters
    ----------
    next_delta : (n_next,)
    next_weights, next_e : (n_next, n)
    o : (n,) firing counts of this layer
    nu : threshold of this layer
    """
    next_delta = np.asarray(next_delta, dtype=float)
    w = np.asarray(next_weights, dtype=float)
    e = np.asarray(next_e, dtype=float)
    if w.shape != e.shape or w.shape[0] != next_delta.shape[0] or w.shape[1] != np.shape(o)[0]:
        raise ConfigError(f"dimension mismatch: delta {next_delta.shape}, w {w.shape}, "
                          f"e {e.shape}, o {np.shape(o)}")
    back = next_delta @ (w * e)
    return _safe_ratio(back, o) / nu


def micro_correction(a, o_post, nu: float) -> np.ndarray:
    """``1 + (1/nu) sum_l w_il e_il / o_i`` per post neuron; the sum is the
    feed-forward T-PSP ``a_i``. Neurons that never fire get 1."""
    return 1.0 + _safe_ratio(a, o_post) / nu


def micro_dadw(e_ij, weights_row, spsp_row, o_post, nu: float) -> float:
    """d a_i / d w_ij including the S-PSPs' dependence on the post count."""
    a = float(np.dot(np.asarray(weights_row, dtype=float), np.asarray(spsp_row, dtype=float)))
    return float(e_ij * micro_correction(a, o_post, nu))


def lateral_gamma(w0: float, nu: float, lateral_e, o) -> np.ndarray:
    """Correction factor for all-to-all lateral connections of weight ``w0``.

    ``gamma_i = 1 / (1 - (w0/nu)^2 sum_{l != i} (e_il / o_l)(e_li / o_i))``
    where ``lateral_e[i, l]`` is the S-PSP of output neuron ``l`` onto ``i``.

    Raises
    ------
    NumericalError
        If any denominator is at or below ``1e-6``.
    """
    e = np.array(lateral_e, dtype=float)
    o = np.asarray(o, dtype=float)
    if e.shape != (o.size, o.size):
        raise ConfigError(f"lateral table {e.shape} does not match {o.size} neurons")
    np.fill_diagonal(e, 0.0)
    d_il = _safe_ratio(e, o[None, :])  # d e_il / d o_l
    d_li = _safe_ratio(e.T, o[:, None])  # d e_li / d o_i, indexed [i, l]
    denom = 1.0 - (w0 * w0) / (nu * nu) * np.sum(d_il * d_li, axis=1)
    if np.any(denom <= GAMMA_EPS):
        bad = np.flatnonzero(denom <= GAMMA_EPS)
        raise NumericalError(
            f"lateral-inhibition system degenerate for output neurons {bad.tolist()}: "
            f"denominators {denom[bad].tolist()} (w0={w0}, nu={nu}, counts {o[bad].tolist()})")
    return 1.0 / denom


def weight_gradient(delta, table: SpsPTable, nu: float, gamma: Optional[np.ndarray] = None) -> np.ndarray:
    """``dE/dw_ij = delta_i * gamma_i * e_ij * (1 + a_i / (nu o_i))`` in the
    shape of the table's connectivity (per connection for conv layers)."""
    scale = np.asarray(delta, dtype=float) * micro_correction(table.a, table.o_post, nu)
    if gamma is not None:
        scale = scale * gamma
    if table.kind == "dense":
        g = scale[:, None] * table.e
    elif table.kind == "conv":
        C, P, _ = table.e.shape
        g = scale.reshape(C, P)[:, :, None] * table.e
    else:
        raise ConfigError(f"{table.kind} connections have no trainable weights")
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite weight gradient")
    return g


def conv_gradient_fold(per_connection, kernel_shape: tuple) -> np.ndarray:
    """Sum untied per-position gradients ``(C_out, P, Q)`` into the shared
    kernel ``kernel_shape = (C_out, C_in, k, k)``."""
    g = np.asarray(per_connection, dtype=float)
    c_out, c_in, k1, k2 = kernel_shape
    if g.ndim != 3 or g.shape[0] != c_out or g.shape[2] != c_in * k1 * k2:
        raise ConfigError(f"per-connection gradients {g.shape} do not fit kernel {kernel_shape}")
    return g.sum(axis=1).reshape(kernel_shape)


def _propagate(net: Network, i: int, delta_i: np.ndarray, fwd: ForwardResult) -> np.ndarray:
    """Unscaled back-projection ``sum_l delta_l w_li e_li`` onto layer ``i-1``."""
    spec = net.layers[i]
    table = fwd.tables[i]
    n_pre = net.size(i - 1)
    if spec.kind == "dense":
        return delta_i @ (net.weights[i] * table.e)
    if spec.kind == "conv":
        idx = INDEX_CACHE.conv(net.shapes[i - 1], spec.kernel)
        kern = net.weights[i].reshape(spec.size, -1)
        C, P, _ = table.e.shape
        contrib = np.einsum("cp,cq,cpq->pq", delta_i.reshape(C, P), kern, table.e)
        return np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=n_pre)
    if spec.kind == "pool":
        idx = INDEX_CACHE.pool(net.shapes[i - 1])
        C, P, _ = idx.shape
        contrib = POOL_WEIGHT * delta_i.reshape(C, P)[:, :, None] * table.e
        return np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=n_pre)
    raise ConfigError(f"cannot propagate through layer kind {spec.kind}")


def backward_pass(net: Network, fwd: ForwardResult, targets, sample_weight: float = 1.0,
                  lateral: bool = True) -> GradientBundle:
    """Gradients of ``0.5 * sample_weight * ||o - y||^2`` for every trainable layer.

    ``lateral=False`` ignores the lateral-connection correction even if the
    output layer has one configured.
    """
    L = net.output_index
    grads = [None] * len(net.layers)
    deltas = [None] * len(net.layers)
    nu_out = net.params(L).threshold
    delta = sample_weight * output_delta(fwd.counts[L], targets, nu_out)
    for i in range(L, 0, -1):
        spec = net.layers[i]
        nu = net.params(i).threshold
        deltas[i] = delta
        table = fwd.tables[i]
        if table is None:
            raise ConfigError("forward pass was run without S-PSP tables")
        if spec.trainable:
            gamma = None
            if lateral and spec.lateral_w0 is not None:
                gamma = lateral_gamma(spec.lateral_w0, nu, table.lateral_e, table.o_post)
            g = weight_gradient(delta, table, nu, gamma)
            if spec.kind == "conv":
                g = conv_gradient_fold(g, net.weight_shape(i))
            grads[i] = g
        if i > 1:
            nu_prev = net.params(i - 1).threshold
            back = _propagate(net, i, delta, fwd)
            delta = _safe_ratio(back, fwd.counts[i - 1]) / nu_prev
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in layer {i}")
    return GradientBundle(grads, deltas)


def loss(o, y) -> float:
    d = np.asarray(o, dtype=float) - np.asarray(y, dtype=float)
    return 0.5 * float(d @ d)


def log_diagnostics(bundle: GradientBundle, batch: int) -> None:
    n = bundle.norms()
    log.info("batch %d grad norms %s delta norms %s", batch,
             ["-" if v is None else f"{v:.4g}" for v in n["grad"]],
             ["-" if v is None else f"{v:.4g}" for v in n["delta"]])
