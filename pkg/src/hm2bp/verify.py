"""Oracle suites: each builds fixed-seed random instances, checks the
training code against an independent computation and reports the observed
error next to its tolerance."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from .core import LayerSpec, Network, NeuronParams, SpikeTrain, TimeGrid, dense_network
from .grad import backward_pass, loss
from .optim import AdamState, adam_step
from .lif import forward_pass, integrate_lif, raster_to_trains, trains_to_raster, srm_membrane
from .reference import reference_gradients
from .spsp import psp_kernel


@dataclass
class Check:
    name: str
    observed: float
    tolerance: float
    passed: bool
    op: str = "<="

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.name}: observed {self.observed:.6g} (required {self.op} {self.tolerance:g})"


@dataclass
class Report:
    suite: str
    checks: list = field(default_factory=list)
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def add(self, name, observed, tolerance, op="<="):
        ok = observed <= tolerance if op == "<=" else observed >= tolerance
        self.checks.append(Check(name, float(observed), float(tolerance), bool(ok), op))

    def text(self) -> str:
        head = f"{self.suite}: {'PASS' if self.passed else 'FAIL'} ({self.seconds:.2f}s)"
        return "\n".join([head] + ["  " + c.line() for c in self.checks])


def _timed(fn: Callable) -> Callable:
    def run(*args, **kw):
        t0 = time.perf_counter()
        rep = fn(*args, **kw)
        rep.seconds = time.perf_counter() - t0
        return rep
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


# ---------------------------------------------------------------------------
# kernel


def kernel_by_quadrature(s: float, t: float, params: NeuronParams) -> float:
    """Direct numerical integration of the membrane response to one
    exponentially decaying synaptic current (unit charge, unit capacitance)."""
    if s <= 0:
        return 0.0
    tau_m, tau_s = params.tau_m, params.tau_s

    def integrand(tp):
        if t - tp < 0:
            return 0.0
        return np.exp(-tp / tau_m) * np.exp(-(t - tp) / tau_s) / tau_s

    upper = s
    pts = [t] if 0 < t < s else None
    val, _ = integrate.quad(integrand, 0.0, upper, points=pts, epsabs=1e-14, epsrel=1e-13, limit=200)
    return val


@_timed
def kernel_suite(n_points: int = 1000, seed: int = 0, tol: float = 1e-8) -> Report:
    """Closed-form kernel vs quadrature over a random (s, t) sweep."""
    params = NeuronParams(tau_m=8.0, tau_s=2.0, threshold=1.0)
    rng = np.random.default_rng(seed)
    s = rng.uniform(-5.0, 60.0, n_points)
    t = rng.uniform(-5.0, 60.0, n_points)
    s[:50] = t[:50]  # exercise the s == t seam
    closed = psp_kernel(s, t, params)
    quad = np.array([kernel_by_quadrature(a, b, params) for a, b in zip(s, t)])
    rep = Report("kernel")
    rep.add(f"max |closed form - quadrature| over {n_points} points", np.max(np.abs(closed - quad)), tol)
    rep.details["max_kernel"] = float(np.max(closed))
    return rep


# ---------------------------------------------------------------------------
# LIF simulation vs SRM


def _srm_instance(rng, duration=200.0):
    n_pre = int(rng.integers(1, 11))
    n_post = int(rng.integers(1, 5))
    rate = rng.uniform(0.02, 0.15)  # spikes per ms
    trains = []
    for _ in range(n_pre):
        n = rng.poisson(rate * duration)
        trains.append(SpikeTrain(np.unique(rng.uniform(0.0, duration - 1.0, n))))
    # |w| <= nu / 10: a single binned input can then move u by at most
    # about nu * 0.5 dt / (10 tau_s)
    weights = rng.uniform(-0.5, 1.0, (n_post, n_pre))
    return trains, weights


def srm_discrepancy(trains, weights, params, grid) -> tuple:
    """Max |simulated voltage - SRM value| at non-spike steps and the spike count."""
    raster = trains_to_raster(trains, grid)
    spikes, volts = integrate_lif(raster @ weights.T, params, grid.dt_ms, record=True)
    post = raster_to_trains(spikes, grid.dt_ms)
    worst = 0.0
    for i in range(weights.shape[0]):
        for k in range(grid.n_steps):
            if spikes[k, i]:
                continue
            u = srm_membrane(trains, weights[i], post[i], params, k * grid.dt_ms)
            worst = max(worst, abs(volts[k, i] - u))
    return worst, int(spikes.sum())


@_timed
def srm_suite(n_instances: int = 100, seed: int = 0, rel_tol: float = 0.02,
              min_ratio: float = 1.5) -> Report:
    """Discrete LIF traces vs the SRM sum with input spikes at arbitrary
    (off-grid) times; the only error source is binning input spikes onto
    the grid, so halving the step should shrink it."""
    params = NeuronParams(tau_m=64.0, tau_s=8.0, threshold=10.0)
    grid = TimeGrid(200.0, 1.0)
    fine = grid.halved()
    rng = np.random.default_rng(seed)
    worst, worst_fine, spikes = 0.0, 0.0, 0
    for _ in range(n_instances):
        trains, w = _srm_instance(rng, grid.duration_ms)
        d, n = srm_discrepancy(trains, w, params, grid)
        d2, _ = srm_discrepancy(trains, w, params, fine)
        worst, worst_fine, spikes = max(worst, d), max(worst_fine, d2), spikes + n
    rep = Report("srm")
    rep.add(f"max discrepancy / threshold (dt={grid.dt_ms})", worst / params.threshold, rel_tol)
    rep.add(f"max discrepancy / threshold (dt={fine.dt_ms})", worst_fine / params.threshold, rel_tol)
    rep.add("discrepancy ratio dt / (dt/2)", worst / max(worst_fine, 1e-300), min_ratio, op=">=")
    rep.details.update(post_spikes=spikes, worst=worst, worst_fine=worst_fine)
    return rep


@_timed
def srm_on_grid_suite(n_instances: int = 20, seed: int = 1, tol: float = 1e-9) -> Report:
    """With inputs already on the grid the exact-propagator simulation and
    the SRM agree to rounding error."""
    params = NeuronParams(tau_m=64.0, tau_s=8.0, threshold=10.0)
    grid = TimeGrid(200.0, 1.0)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        trains, w = _srm_instance(rng, grid.duration_ms)
        trains = [SpikeTrain(np.unique(tr.steps(grid.dt_ms)) * grid.dt_ms) for tr in trains]
        worst = max(worst, srm_discrepancy(trains, w, params, grid)[0])
    rep = Report("srm-on-grid")
    rep.add("max discrepancy (on-grid inputs)", worst, tol)
    return rep


# ---------------------------------------------------------------------------
# firing-count bridge


def _random_dense(rng, sizes, thresholds, w_scale=1.0, lateral_w0=None):
    params = [NeuronParams(64.0, 8.0, nu) for nu in thresholds]
    net = dense_network(sizes, params, lateral_w0=lateral_w0)
    for i in net.trainable_indices():
        net.weights[i] = rng.uniform(-0.3, 1.0, net.weight_shape(i)) * w_scale
    return net


def _poisson_input(rng, n, grid, rate):
    rates = rng.uniform(0.3, 1.0, n) * rate
    return (rng.random((grid.n_steps, n)) < rates).astype(float)


def count_bridge_stats(n_passes: int = 100, seed: int = 0):
    """|o_i - a_i / nu| for every non-input neuron over random forward passes."""
    rng = np.random.default_rng(seed)
    grid = TimeGrid(200.0, 1.0)
    gaps, fired = [], []
    for _ in range(n_passes):
        sizes = [int(rng.integers(10, 31)), int(rng.integers(3, 11)), int(rng.integers(2, 6))]
        net = _random_dense(rng, sizes, [10.0, 10.0], w_scale=rng.uniform(0.5, 1.5))
        fwd = forward_pass(net, _poisson_input(rng, sizes[0], grid, 0.08), grid)
        for i in range(1, len(net.layers)):
            tab = fwd.tables[i]
            nu = net.params(i).threshold
            gaps.append(np.abs(fwd.counts[i] - tab.a / nu))
            fired.append(fwd.counts[i] > 0)
    return np.concatenate(gaps), np.concatenate(fired)


@_timed
def bridge_suite(n_passes: int = 100, seed: int = 0, min_frac: float = 0.95) -> Report:
    gaps, fired = count_bridge_stats(n_passes, seed)
    rep = Report("bridge")
    rep.add("fraction of neurons with |o - a/nu| <= 1", np.mean(gaps <= 1.0), min_frac, op=">=")
    rep.add("same, firing neurons only", np.mean(gaps[fired] <= 1.0), min_frac, op=">=")
    rep.details.update(n_neurons=int(gaps.size), n_firing=int(fired.sum()),
                       max_gap=float(gaps.max()))
    return rep


# ---------------------------------------------------------------------------
# backward pass vs straight-line reference


def _transcript_instance(rng, force_sizes=None):
    sizes = force_sizes or [int(rng.integers(1, 5)) for _ in range(int(rng.integers(2, 4)))]
    grid = TimeGrid(150.0, 1.0)
    w0 = None
    if rng.random() < 0.5:
        w0 = float(rng.uniform(-1.0, 0.0))
    nus = [float(rng.uniform(5, 12)) for _ in sizes[1:]]
    net = dense_network(sizes, [NeuronParams(float(rng.uniform(20, 64)), float(rng.uniform(2, 8)), nu)
                                for nu in nus], lateral_w0=w0)
    for i in net.trainable_indices():
        net.weights[i] = rng.uniform(-1.0, 4.0, net.weight_shape(i))
    inp = (rng.random((grid.n_steps, sizes[0])) < rng.uniform(0.05, 0.3, sizes[0])).astype(float)
    y = rng.integers(0, 10, sizes[-1]).astype(float)
    return net, grid, inp, y


def transcript_compare(net: Network, fwd, y) -> float:
    """Max relative error of the production gradients against the reference."""
    dt = fwd.grid.dt_ms
    trains = [[list(tr.times) for tr in raster_to_trains(r, dt)] for r in fwd.rasters]
    weights = [net.weights[i].tolist() for i in net.trainable_indices()]
    params = [(net.params(i).tau_m, net.params(i).tau_s, net.params(i).threshold)
              for i in net.trainable_indices()]
    ref, _ = reference_gradients(weights, trains, params, list(y), net.layers[-1].lateral_w0)
    prod = backward_pass(net, fwd, y)
    worst = 0.0
    for i, g_ref in zip(net.trainable_indices(), ref):
        g_ref = np.asarray(g_ref)
        scale = max(np.max(np.abs(g_ref)), 1e-300)
        worst = max(worst, float(np.max(np.abs(prod.grads[i] - g_ref))) / scale if g_ref.size else 0.0)
    return worst


@_timed
def transcript_suite(n_nets: int = 50, seed: int = 0, tol: float = 1e-10) -> Report:
    rng = np.random.default_rng(seed)
    worst = 0.0
    nonzero = 0
    bitwise = True
    for k in range(n_nets):
        net, grid, inp, y = _transcript_instance(rng, [2, 2, 2] if k == 0 else None)
        fwd = forward_pass(net, inp, grid)
        if any(np.any(fwd.counts[i] > 0) for i in range(1, len(net.layers))):
            nonzero += 1
        worst = max(worst, transcript_compare(net, fwd, y))

        # w0 = 0 must reproduce the plain path bit for bit
        plain = net.copy()
        plain.layers[-1] = LayerSpec("dense", size=plain.layers[-1].size, params=plain.layers[-1].params)
        zero = net.copy()
        zero.layers[-1] = LayerSpec("dense", size=zero.layers[-1].size, params=zero.layers[-1].params,
                                    lateral_w0=0.0)
        f_plain = forward_pass(plain, inp, grid)
        f_zero = forward_pass(zero, inp, grid)
        g_plain = backward_pass(plain, f_plain, y)
        g_zero = backward_pass(zero, f_zero, y)
        for a, b in zip(g_plain.grads, g_zero.grads):
            if a is not None and not np.array_equal(a, b):
                bitwise = False
    rep = Report("transcript")
    rep.add(f"max relative error vs reference over {n_nets} nets", worst, tol)
    rep.add("w0=0 bundles differing from the plain path", 0.0 if bitwise else 1.0, 0.0)
    rep.details.update(nets_with_spikes=nonzero)
    return rep


# ---------------------------------------------------------------------------
# descent


def descent_trial(seed: int, lr: float = 1e-3, n_samples: int = 5):
    """Loss on a fixed tiny batch before and after one plain gradient step."""
    rng = np.random.default_rng(seed)
    grid = TimeGrid(200.0, 1.0)
    sizes = [20, 10, 3]
    net = dense_network(sizes, [NeuronParams(64.0, 8.0, 10.0), NeuronParams(64.0, 8.0, 20.0)])
    # excitatory bias so the output layer fires; a silent output has zero gradient
    for i in net.trainable_indices():
        net.weights[i] = rng.uniform(-0.5, 1.5, net.weight_shape(i))
    inputs = [_poisson_input(rng, sizes[0], grid, 0.3) for _ in range(n_samples)]
    targets = [np.where(np.arange(3) == rng.integers(3), 35.0, 5.0) for _ in range(n_samples)]

    def batch_loss(n):
        return sum(loss(forward_pass(n, x, grid, tables=False).output_counts, y)
                   for x, y in zip(inputs, targets))

    before = batch_loss(net)
    grads = None
    for x, y in zip(inputs, targets):
        b = backward_pass(net, forward_pass(net, x, grid), y)
        grads = b.grads if grads is None else [None if g is None else g + h for g, h in zip(grads, b.grads)]
    stepped = net.copy()
    for i in stepped.trainable_indices():
        stepped.weights[i] = stepped.weights[i] - lr * grads[i] / n_samples
    return before, batch_loss(stepped)


@_timed
def descent_suite(n_seeds: int = 50, lr: float = 1e-3, min_frac: float = 0.8) -> Report:
    results = [descent_trial(s, lr) for s in range(n_seeds)]
    improved = np.mean([after < before for before, after in results])
    rep = Report("descent")
    rep.add(f"fraction of {n_seeds} seeds where one step (lr={lr}) lowers the loss", improved,
            min_frac, op=">=")
    rep.details["losses"] = results
    return rep


# ---------------------------------------------------------------------------
# alpha-hat drift during training


def alpha_trajectory(epochs: int = 20, seed: int = 0, lr: float = 1e-2, n_samples: int = 20,
                     batch: int = 5, n_inputs: int = 10):
    """Train a ``n_inputs``-1 network to map input patterns to high or low
    output counts and record, after every epoch, the mean alpha-hat of one
    randomly chosen synapse over the samples where both its neurons fire.

    Returns ``(alphas, losses, synapse)``; entry 0 is before training.
    """
    rng = np.random.default_rng(seed)
    grid = TimeGrid(200.0, 1.0)
    net = dense_network([n_inputs, 1], [NeuronParams(64.0, 8.0, 10.0)])
    net.weights[1] = rng.uniform(0.0, 1.0, (1, n_inputs))
    # odd samples drive the first half of the inputs harder than the second
    half = np.arange(n_inputs) < n_inputs // 2
    inputs, targets = [], []
    for k in range(n_samples):
        rates = np.where(half == bool(k % 2), 0.25, 0.05) * rng.uniform(0.7, 1.3, n_inputs)
        inputs.append((rng.random((grid.n_steps, n_inputs)) < rates).astype(float))
        targets.append(np.array([35.0 if k % 2 else 5.0]))
    synapse = int(rng.integers(n_inputs))
    adam = AdamState.like(net.weights, lr=lr)

    def measure():
        vals, total = [], 0.0
        for x, y in zip(inputs, targets):
            fwd = forward_pass(net, x, grid)
            total += loss(fwd.output_counts, y)
            tab = fwd.tables[1]
            if tab.o_post[0] > 0 and tab.o_pre[synapse] > 0:
                vals.append(tab.alpha_hat()[0, synapse])
        return (float(np.mean(vals)) if vals else float("nan")), total / n_samples

    alphas, losses = [], []
    a, l = measure()
    alphas.append(a)
    losses.append(l)
    for _ in range(epochs):
        order = rng.permutation(n_samples)
        for start in range(0, n_samples, batch):
            grads = None
            idx = order[start:start + batch]
            for k in idx:
                g = backward_pass(net, forward_pass(net, inputs[k], grid), targets[k]).grads
                grads = g if grads is None else [None if u is None else u + v for u, v in zip(grads, g)]
            grads = [None if g is None else g / len(idx) for g in grads]
            net.weights = adam_step(adam, grads, net.weights)
        a, l = measure()
        alphas.append(a)
        losses.append(l)
    return np.array(alphas), np.array(losses), synapse


@_timed
def alpha_suite(epochs: int = 20, seed: int = 0, max_drift: float = 0.2,
                min_frac: float = 0.9, lr: float = 1e-2) -> Report:
    alphas, losses, synapse = alpha_trajectory(epochs, seed, lr)
    drift = np.abs(np.diff(alphas)) / np.abs(alphas[:-1])
    drift = np.where(np.isfinite(drift), drift, np.inf)
    rep = Report("alpha")
    rep.add(f"fraction of epochs with relative alpha-hat drift <= {max_drift}",
            np.mean(drift <= max_drift), min_frac, op=">=")
    rep.details.update(alphas=alphas.tolist(), losses=losses.tolist(), synapse=synapse,
                       max_drift=float(np.max(drift)))
    return rep


SUITES = {
    "kernel": kernel_suite,
    "srm": srm_suite,
    "transcript": transcript_suite,
    "descent": descent_suite,
    "bridge": bridge_suite,
    "alpha": alpha_suite,
}
