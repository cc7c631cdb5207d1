"""Post-synaptic potential kernel, spike-train level PSPs (S-PSP), total PSPs
(T-PSP) and the decoupled rate/timing estimates used by the backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from .core import ConfigError, NeuronParams, SpikeTrain, last_firing_before


def psp_kernel(s, t, params: NeuronParams):
    """Normalised PSP of one input spike.

    Parameters
    ----------
    s : float or array_like
        Time since the post-synaptic neuron's last reset (ms).
    t : float or array_like
        Time since the pre-synaptic spike (ms).
    params : NeuronParams

    Returns
    -------
    float or ndarray
        Zero whenever ``s <= 0`` or ``t <= 0``.
    """
    tau_m, tau_s = params.tau_m, params.tau_s
    if tau_m == tau_s:
        raise ConfigError("tau_m == tau_s makes the PSP kernel singular")
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    m = np.minimum(s, t)
    lag = np.maximum(t - s, 0.0)
    val = np.exp(-lag / tau_s) / (1.0 - tau_s / tau_m) * (np.exp(-m / tau_m) - np.exp(-m / tau_s))
    val = np.where((s > 0) & (t > 0), val, 0.0)
    return float(val) if val.ndim == 0 else val


def spsp(pre: SpikeTrain, post: SpikeTrain, params: NeuronParams) -> float:
    """S-PSP of ``pre`` onto ``post``: the kernel summed over every
    (post spike, pre spike) pair, each post spike measured from its own
    preceding reset."""
    if not len(pre) or not len(post):
        return 0.0
    pre_t = np.asarray(pre.times)
    total = 0.0
    for tf in post.times:
        s = tf - last_firing_before(post, tf)
        total += float(np.sum(psp_kernel(s, tf - pre_t, params)))
    return total


def tpsp(weights_row, spsp_row) -> float:
    """T-PSP: weighted sum of S-PSPs over all inputs of one neuron."""
    w = np.asarray(weights_row, dtype=float)
    e = np.asarray(spsp_row, dtype=float)
    if w.shape != e.shape:
        raise ValueError(f"length mismatch: {w.shape} vs {e.shape}")
    return float(w @ e)


def firing_count_estimate(a: float, nu: float) -> tuple:
    """Firing count predicted from T-PSP ``a``: ``(floor(a/nu), a/nu)``."""
    if not nu > 0:
        raise ValueError("threshold must be positive")
    ratio = a / nu
    return int(np.floor(ratio)), ratio


def alpha_hat(e, o_pre, o_post):
    """Timing correction ``e / (o_pre * o_post)``; 0 when either count is 0."""
    e = np.asarray(e, dtype=float)
    denom = np.asarray(o_pre, dtype=float) * np.asarray(o_post, dtype=float)
    out = np.divide(e, denom, out=np.zeros(np.broadcast(e, denom).shape), where=denom > 0)
    return float(out) if out.ndim == 0 else out


def _ratio(e, o):
    e = np.asarray(e, dtype=float)
    o = np.asarray(o, dtype=float)
    out = np.divide(e, o, out=np.zeros(np.broadcast(e, o).shape), where=o > 0)
    return float(out) if out.ndim == 0 else out


def d_spsp_d_opost(e, o_post):
    """Estimate of d e / d o_post, i.e. ``e / o_post`` (0 if o_post == 0)."""
    return _ratio(e, o_post)


def d_spsp_d_opre(e, o_pre):
    """Estimate of d e / d o_pre, i.e. ``e / o_pre`` (0 if o_pre == 0)."""
    return _ratio(e, o_pre)


# ---------------------------------------------------------------------------
# vectorised tables for the training path


def response_matrix(post_raster: np.ndarray, params: NeuronParams, dt: float) -> np.ndarray:
    """Per-post-neuron response to a unit input spike at every grid step.

    ``K[i, k]`` is the S-PSP contribution that a single pre-synaptic spike at
    step ``k`` makes onto post neuron ``i`` given its spike train, so that
    ``e = K @ pre_raster`` for any set of on-grid inputs.

    Parameters
    ----------
    post_raster : ndarray, shape (T, N)
        Post-synaptic spikes (0/1) on the grid.
    """
    spikes = np.asarray(post_raster) > 0
    T, N = spikes.shape
    d = np.arange(T + 1) * dt
    ctx = 1.0 / (1.0 - params.tau_s / params.tau_m)
    within_table = ctx * (np.exp(-d / params.tau_m) - np.exp(-d / params.tau_s))
    within_table[-1] = 0.0  # sentinel slot for "no later spike"

    # next post spike strictly after k (T if none)
    steps = np.where(spikes, np.arange(T)[:, None], T)
    nxt = np.full((T, N), T, dtype=np.int64)
    nxt[:-1] = np.minimum.accumulate(steps[::-1], axis=0)[::-1][1:]
    lag = np.where(nxt < T, nxt - np.arange(T)[:, None], T)
    within = within_table[lag]

    # pre spikes before an intermediate reset still reach later post spikes,
    # damped by the synaptic decay from the spike to that reset
    decay = np.exp(-dt / params.tau_s)
    x = np.where(spikes, within, 0.0)
    y = lfilter([1.0], [1.0, -decay], x[::-1], axis=0)[::-1]
    return (within + (y - x)).T


@dataclass
class SpsPTable:
    """S-PSPs and counts of one connection stage, cached by the forward pass.

    ``e`` follows the connectivity of the stage: ``(n_post, n_pre)`` for dense
    layers, ``(C_out, P, Q)`` for conv layers (position ``p``, patch entry
    ``q``) and ``(C, P, 4)`` for pool layers. ``a`` is the feed-forward T-PSP
    per post neuron (flattened). ``lateral_e[i, l]`` holds the S-PSP of output
    neuron ``l`` onto output neuron ``i`` when lateral connections exist.
    """

    kind: str
    e: np.ndarray
    o_pre: np.ndarray
    o_post: np.ndarray
    a: np.ndarray
    lateral_e: Optional[np.ndarray] = None

    def alpha_hat(self) -> np.ndarray:
        if self.kind != "dense":
            raise ValueError("alpha_hat matrix only defined for dense tables")
        return alpha_hat(self.e, self.o_pre[None, :], self.o_post[:, None])
