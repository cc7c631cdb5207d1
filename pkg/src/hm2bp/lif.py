"""Discrete-time LIF simulation with first-order synaptic currents, the
equivalent SRM evaluation, and the layer-by-layer forward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, TextIO

import numpy as np
from scipy import sparse
from numpy.lib.stride_tricks import sliding_window_view

from .core import POOL_WEIGHT, ConfigError, Network, NeuronParams, SpikeTrain, TimeGrid, last_firing_before
from .spsp import SpsPTable, psp_kernel, response_matrix


@dataclass
class MembraneTrace:
    """Recorded membrane potential of one neuron (post-reset value per step)."""

    voltages: np.ndarray
    spike_steps: list


def trains_to_raster(trains: Sequence[SpikeTrain], grid: TimeGrid) -> np.ndarray:
    """Bin spike trains onto the grid, ``(T, N)`` spike counts.

    Each time goes to its nearest step; times beyond the last step are dropped.
    """
    T = grid.n_steps
    raster = np.zeros((T, len(trains)))
    for j, tr in enumerate(trains):
        if len(tr):
            k = tr.steps(grid.dt_ms)
            k = k[(k >= 0) & (k < T)]
            np.add.at(raster[:, j], k, 1.0)
    return raster


def raster_to_trains(raster: np.ndarray, dt: float) -> list:
    raster = np.asarray(raster).reshape(raster.shape[0], -1)
    return [SpikeTrain.from_steps(np.flatnonzero(raster[:, i]), dt) for i in range(raster.shape[1])]


def lif_coefficients(params: NeuronParams, dt: float) -> tuple:
    """Exact one-step propagators ``(membrane decay, synaptic decay, coupling)``."""
    dm = math.exp(-dt / params.tau_m)
    ds = math.exp(-dt / params.tau_s)
    coupling = params.tau_m * params.tau_s / (params.tau_m - params.tau_s) * (dm - ds)
    return dm, ds, coupling


def integrate_lif(drive: np.ndarray, params: NeuronParams, dt: float,
                  lateral_w0: Optional[float] = None, record: bool = False):
    """Run a population of LIF neurons on the grid.

    Parameters
    ----------
    drive : ndarray, shape (T, N)
        Weighted input spikes arriving at each step, ``sum_j w_ij s_j[k]``.
    lateral_w0 : float, optional
        Fixed weight of all-to-all lateral connections inside the population.
        A spike at step ``k`` enters the synaptic currents of the other
        neurons at step ``k``, so it first affects their membranes at ``k+1``.
    record : bool
        Also return the ``(T, N)`` post-reset voltages.

    Returns
    -------
    spikes : ndarray, shape (T, N), 0/1 floats
    voltages : ndarray or None
    """
    drive = np.asarray(drive, dtype=float)
    T, N = drive.shape
    dm, ds, coupling = lif_coefficients(params, dt)
    nu = params.threshold
    inv_tau_s = 1.0 / params.tau_s
    u = np.zeros(N)
    cur = np.zeros(N)
    spikes = np.zeros((T, N))
    volts = np.zeros((T, N)) if record else None
    for k in range(T):
        if k:
            u = u * dm + cur * coupling
            cur = cur * ds
        fired = u >= nu
        if fired.any():
            u[fired] = 0.0
            spikes[k] = fired
        cur = cur + drive[k] * inv_tau_s
        if lateral_w0 is not None and fired.any():
            cur = cur + (lateral_w0 * inv_tau_s) * (fired.sum() - fired)
        if record:
            volts[k] = u
    return spikes, volts


def simulate_layer(pre_trains: Sequence[SpikeTrain], weights, params: NeuronParams,
                   grid: TimeGrid, lateral_w0: Optional[float] = None):
    """Simulate one fully connected LIF layer driven by ``pre_trains``.

    Input spikes are binned to the nearest grid step. Returns the post spike
    trains (on-grid times) and one :class:`MembraneTrace` per post neuron.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 2 or w.shape[1] != len(pre_trains):
        raise ConfigError(f"weights {w.shape} do not match {len(pre_trains)} inputs")
    raster = trains_to_raster(pre_trains, grid)
    spikes, volts = integrate_lif(raster @ w.T, params, grid.dt_ms, lateral_w0, record=True)
    trains = raster_to_trains(spikes, grid.dt_ms)
    traces = [MembraneTrace(volts[:, i].copy(), np.flatnonzero(spikes[:, i]).tolist())
              for i in range(w.shape[0])]
    return trains, traces


def srm_membrane(pre_trains: Sequence[SpikeTrain], weights, post_train: SpikeTrain,
                 params: NeuronParams, t: float) -> float:
    """Membrane potential of one neuron at time ``t`` from the SRM sum.

    ``weights`` is the neuron's weight row; ``post_train`` supplies the reset
    history. The value at a firing time is the pre-reset potential.
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(pre_trains),):
        raise ConfigError("one weight per pre-synaptic train expected")
    s = t - last_firing_before(post_train, t)
    u = 0.0
    for wj, tr in zip(w, pre_trains):
        if len(tr) and wj != 0.0:
            u += wj * float(np.sum(psp_kernel(s, t - np.asarray(tr.times), params)))
    return u


def dump_traces(traces: Sequence[MembraneTrace], grid: TimeGrid, out: TextIO) -> None:
    """Write a ``step time neuron voltage spike`` log for manual inspection."""
    out.write("# step time_ms neuron voltage spike\n")
    for i, tr in enumerate(traces):
        spiking = set(tr.spike_steps)
        for k, v in enumerate(tr.voltages):
            out.write(f"{k} {k * grid.dt_ms:.6g} {i} {v:.9g} {int(k in spiking)}\n")


# ---------------------------------------------------------------------------
# network forward pass


def conv_patch_index(in_shape: tuple, kernel: int) -> np.ndarray:
    """Flat input indices feeding every output position: ``(P, C_in*k*k)``.

    Patch entries are ordered (channel, row, col) to match a kernel reshaped
    to ``(C_out, C_in*k*k)``.
    """
    c, h, w = in_shape
    flat = np.arange(c * h * w).reshape(c, h, w)
    win = sliding_window_view(flat, (kernel, kernel), axis=(1, 2))  # (c, H', W', k, k)
    hp, wp = win.shape[1], win.shape[2]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4).reshape(hp * wp, c * kernel * kernel))


def pool_index(in_shape: tuple) -> np.ndarray:
    """Flat input indices of each pooling neuron's 2x2 block: ``(C, P, 4)``."""
    c, h, w = in_shape
    flat = np.arange(c * h * w).reshape(c, h // 2, 2, w // 2, 2)
    return np.ascontiguousarray(flat.transpose(0, 1, 3, 2, 4).reshape(c, (h // 2) * (w // 2), 4))


@dataclass
class ForwardResult:
    """Everything the backward pass needs from one sample's forward pass.

    ``rasters[i]`` is the ``(T, N_i)`` spike raster of layer ``i`` (flattened
    neuron order); ``counts[i]`` its firing counts; ``tables[i]`` the
    :class:`SpsPTable` of the connections into layer ``i`` (``None`` for the
    input layer).
    """

    grid: TimeGrid
    rasters: list
    counts: list
    tables: list
    traces: list = field(default_factory=list)

    @property
    def output_counts(self) -> np.ndarray:
        return self.counts[-1]


class _IndexCache(dict):
    def conv(self, in_shape, kernel):
        key = ("conv", tuple(in_shape), kernel)
        if key not in self:
            self[key] = conv_patch_index(in_shape, kernel)
        return self[key]

    def pool(self, in_shape):
        key = ("pool", tuple(in_shape))
        if key not in self:
            self[key] = pool_index(in_shape)
        return self[key]


INDEX_CACHE = _IndexCache()


def conv_matrix(net: Network, i: int) -> sparse.csr_matrix:
    """Conv layer ``i`` unrolled into a sparse ``(N_post, N_pre)`` weight matrix."""
    spec = net.layers[i]
    idx = INDEX_CACHE.conv(net.shapes[i - 1], spec.kernel)
    P, Q = idx.shape
    C = spec.size
    kern = net.weights[i].reshape(C, Q)
    data = np.broadcast_to(kern[:, None, :], (C, P, Q)).ravel()
    indices = np.tile(idx, (C, 1)).ravel()
    indptr = np.arange(0, C * P * Q + 1, Q)
    return sparse.csr_matrix((data, indices, indptr), shape=(C * P, net.size(i - 1)))


def layer_drive(net: Network, i: int, pre: np.ndarray) -> np.ndarray:
    """Weighted input spikes ``(T, N_i)`` into layer ``i`` from raster ``pre``."""
    spec = net.layers[i]
    T = pre.shape[0]
    if spec.kind == "dense":
        w = net.weights[i]
        active = np.flatnonzero(pre.any(axis=0))
        if active.size == 0:
            return np.zeros((T, spec.size))
        return pre[:, active] @ w[:, active].T
    if spec.kind == "conv":
        # spikes are sparse: multiply a sparse raster by the unrolled kernel
        w = conv_matrix(net, i)
        return np.asarray((sparse.csr_matrix(pre) @ w.T).toarray())
    if spec.kind == "pool":
        idx = INDEX_CACHE.pool(net.shapes[i - 1])
        return POOL_WEIGHT * pre[:, idx].sum(axis=3).reshape(T, -1)
    raise ConfigError(f"layer {i} of kind {spec.kind} has no drive")


def build_table(net: Network, i: int, pre: np.ndarray, post: np.ndarray,
                o_pre: np.ndarray, o_post: np.ndarray, dt: float) -> SpsPTable:
    """S-PSP table of the connections into layer ``i``."""
    spec = net.layers[i]
    params = net.params(i)
    T = pre.shape[0]
    K = response_matrix(post, params, dt)  # (N_post, T)
    lateral_e = None
    if spec.kind == "dense":
        e = np.zeros((spec.size, pre.shape[1]))
        active = np.flatnonzero(o_pre > 0)
        fired = np.flatnonzero(o_post > 0)
        if active.size and fired.size:
            e[np.ix_(fired, active)] = K[fired] @ pre[:, active]
        a = np.einsum("ij,ij->i", net.weights[i], e)
        if spec.lateral_w0 is not None:
            lateral_e = K @ post
            np.fill_diagonal(lateral_e, 0.0)
    elif spec.kind == "conv":
        idx = INDEX_CACHE.conv(net.shapes[i - 1], spec.kernel)
        c_out = spec.size
        P, Q = idx.shape
        e = np.zeros((c_out * P, Q))
        fired = np.flatnonzero(o_post > 0)
        if fired.size and o_pre.any():
            # (n_fired, N_pre) responses to every input, then pick each patch
            full = (sparse.csr_matrix(pre.T) @ K[fired].T).T
            e[fired] = np.take_along_axis(full, idx[fired % P], axis=1)
        e = e.reshape(c_out, P, Q)
        kern = net.weights[i].reshape(c_out, -1)
        a = np.einsum("cpq,cq->cp", e, kern).ravel()
    elif spec.kind == "pool":
        idx = INDEX_CACHE.pool(net.shapes[i - 1])
        C, P, _ = idx.shape
        children = pre[:, idx]  # (T, C, P, 4)
        e = np.einsum("cpt,tcpq->cpq", K.reshape(C, P, T), children)
        a = POOL_WEIGHT * e.sum(axis=2).ravel()
    else:
        raise ConfigError(f"no table for layer kind {spec.kind}")
    return SpsPTable(spec.kind, e, o_pre, o_post, a, lateral_e)


def forward_pass(net: Network, inputs, grid: TimeGrid, record_traces: bool = False,
                 tables: bool = True) -> ForwardResult:
    """Simulate all layers in order.

    Parameters
    ----------
    inputs : ndarray (T, N_in) or sequence of SpikeTrain
        Input spikes; trains are binned onto ``grid``.
    tables : bool
        Build S-PSP tables (needed for the backward pass, skipped for
        evaluation-only runs).
    """
    if isinstance(inputs, np.ndarray):
        raster = np.asarray(inputs, dtype=float).reshape(inputs.shape[0], -1)
    else:
        raster = trains_to_raster(list(inputs), grid)
    if raster.shape != (grid.n_steps, net.size(0)):
        raise ConfigError(f"input raster {raster.shape} != ({grid.n_steps}, {net.size(0)})")
    rasters = [raster]
    counts = [raster.sum(axis=0)]
    tabs = [None]
    traces = [None]
    for i in range(1, len(net.layers)):
        if net.layers[i].trainable and net.weights[i] is None:
            raise ConfigError(f"layer {i} has no weights")
        drive = layer_drive(net, i, rasters[-1])
        spikes, volts = integrate_lif(drive, net.params(i), grid.dt_ms,
                                      net.layers[i].lateral_w0, record=record_traces)
        o = spikes.sum(axis=0)
        tabs.append(build_table(net, i, rasters[-1], spikes, counts[-1], o, grid.dt_ms)
                    if tables else None)
        rasters.append(spikes)
        counts.append(o)
        traces.append(volts)
    return ForwardResult(grid, rasters, counts, tabs, traces if record_traces else [])
