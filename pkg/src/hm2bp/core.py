"""Shared domain types: time grids, spike trains, neuron parameters and
feed-forward network topologies."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


class HM2BPError(Exception):
    """Base class for all package errors."""


class ConfigError(HM2BPError):
    """Invalid configuration or inconsistent dimensions."""


class DataError(HM2BPError):
    """Malformed or missing dataset files."""


class NumericalError(HM2BPError):
    """Non-finite values or a degenerate gradient system."""


class VerificationError(HM2BPError):
    """An oracle suite did not meet its tolerance."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform simulation grid.

    Parameters
    ----------
    duration_ms : float
        Length of the simulation window in ms.
    dt_ms : float
        Step size in ms.
    """

    duration_ms: float
    dt_ms: float

    def __post_init__(self):
        if not self.dt_ms > 0:
            raise ConfigError(f"dt_ms must be positive, got {self.dt_ms}")
        if not self.duration_ms > 0:
            raise ConfigError(f"duration_ms must be positive, got {self.duration_ms}")
        if self.n_steps < 1:
            raise ConfigError("grid must contain at least one step")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_ms / self.dt_ms))

    @classmethod
    def from_steps(cls, n_steps: int, dt_ms: float) -> "TimeGrid":
        return cls(n_steps * dt_ms, dt_ms)

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt_ms

    def halved(self) -> "TimeGrid":
        return TimeGrid(self.duration_ms, self.dt_ms / 2)


class SpikeTrain:
    """Strictly increasing firing times (ms) of a single neuron.

    Unsorted input is sorted; repeated times are rejected. When ``duration_ms``
    is given, every time must lie in ``[0, duration_ms)``.
    """

    __slots__ = ("_times",)

    def __init__(self, times: Iterable[float] = (), duration_ms: Optional[float] = None):
        ts = sorted(float(t) for t in times)
        for a, b in zip(ts, ts[1:]):
            if not b > a:
                raise ValueError(f"duplicate spike time {a}")
        if ts and not all(math.isfinite(t) for t in ts):
            raise ValueError("spike times must be finite")
        if duration_ms is not None and ts and (ts[0] < 0 or ts[-1] >= duration_ms):
            raise ValueError(f"spike times must lie in [0, {duration_ms})")
        self._times = tuple(ts)

    @classmethod
    def from_steps(cls, steps: Iterable[int], dt_ms: float) -> "SpikeTrain":
        return cls(int(k) * dt_ms for k in steps)

    @property
    def times(self) -> tuple:
        return self._times

    def __len__(self) -> int:
        return len(self._times)

    def __iter__(self):
        return iter(self._times)

    def __eq__(self, other) -> bool:
        return isinstance(other, SpikeTrain) and self._times == other._times

    def __hash__(self):
        return hash(self._times)

    def __repr__(self) -> str:
        return f"SpikeTrain({list(self._times)})"

    def steps(self, dt_ms: float) -> np.ndarray:
        """Nearest grid step of every spike."""
        return np.rint(np.asarray(self._times) / dt_ms).astype(np.int64)


def firing_count(train: SpikeTrain) -> int:
    return len(train)


def last_firing_before(train: SpikeTrain, t: float) -> float:
    """Latest firing time strictly before ``t``; 0.0 (window start) if none."""
    times = train.times
    k = bisect.bisect_left(times, t)
    return times[k - 1] if k > 0 else 0.0


@dataclass(frozen=True)
class NeuronParams:
    """LIF constants for one layer.

    ``tau_m`` and ``tau_s`` are in ms; ``threshold`` is the firing threshold
    in the (weight-normalised) potential units of the PSP kernel.
    """

    tau_m: float = 64.0
    tau_s: float = 8.0
    threshold: float = 10.0

    def __post_init__(self):
        if not self.tau_s > 0:
            raise ConfigError(f"tau_s must be positive, got {self.tau_s}")
        if self.tau_m == self.tau_s:
            raise ConfigError("tau_m == tau_s makes the PSP kernel singular")
        if not self.tau_m > self.tau_s:
            raise ConfigError(f"need tau_m > tau_s, got tau_m={self.tau_m}, tau_s={self.tau_s}")
        if not self.threshold > 0:
            raise ConfigError(f"threshold must be positive, got {self.threshold}")

    @classmethod
    def for_grid(cls, dt_ms: float, threshold: float = 10.0) -> "NeuronParams":
        # defaults scale with the step: tau_m = 64 dt, tau_s = 8 dt
        return cls(64.0 * dt_ms, 8.0 * dt_ms, threshold)


DEFAULT_THRESHOLDS = {"dense": 10.0, "conv": 5.0, "pool": 5.0, "output": 20.0}
POOL_WEIGHT = 0.25
INIT_SCALE = {"dense": 1.0, "conv": 0.5}


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feed-forward network.

    ``kind`` is one of ``input``, ``dense``, ``conv``, ``pool``.
    For ``input`` the ``shape`` holds the raw input shape, for ``dense`` the
    neuron count is ``size``, for ``conv`` ``size`` is the number of output
    channels and ``kernel`` the square kernel width. Pooling uses
    non-overlapping ``window`` x ``window`` blocks with fixed weight 0.25.
    ``lateral_w0`` enables same-layer lateral connections of fixed weight
    (output layer only).
    """

    kind: str
    size: int = 0
    shape: tuple = ()
    kernel: int = 5
    stride: int = 1
    window: int = 2
    params: Optional[NeuronParams] = None
    lateral_w0: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("input", "dense", "conv", "pool"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "input" and not self.shape:
            raise ConfigError("input layer needs a shape")
        if self.kind in ("dense", "conv") and self.size < 1:
            raise ConfigError(f"{self.kind} layer needs a positive size")
        if self.kind == "conv" and self.stride != 1:
            raise ConfigError("only stride-1 convolutions are supported")
        if self.kind == "pool" and self.window != 2:
            raise ConfigError("only 2x2 pooling is supported")
        if self.lateral_w0 is not None and self.kind != "dense":
            raise ConfigError("lateral inhibition is only supported on dense layers")

    @property
    def trainable(self) -> bool:
        return self.kind in ("dense", "conv")


@dataclass
class Network:
    """Feed-forward topology plus weight storage.

    Dense weights are ``(n_post, n_pre)``; conv kernels are
    ``(out_channels, in_channels, k, k)``. Input and pool layers hold ``None``.
    ``shapes[i]`` is the neuron layout of layer ``i``: ``(n,)`` or ``(C, H, W)``.
    """

    layers: list
    weights: list = field(default_factory=list)
    shapes: list = field(default_factory=list)

    def __post_init__(self):
        if not self.layers or self.layers[0].kind != "input":
            raise ConfigError("first layer must be an input layer")
        if any(l.kind == "input" for l in self.layers[1:]):
            raise ConfigError("only the first layer may be an input layer")
        if self.layers[-1].kind != "dense":
            raise ConfigError("last layer must be dense")
        if any(l.lateral_w0 is not None for l in self.layers[:-1]):
            raise ConfigError("lateral inhibition is only allowed on the output layer")
        self.shapes = _infer_shapes(self.layers)
        if not self.weights:
            self.weights = [None] * len(self.layers)
        if len(self.weights) != len(self.layers):
            raise ConfigError("one weight slot per layer expected")
        for i, (spec, w) in enumerate(zip(self.layers, self.weights)):
            expected = self.weight_shape(i)
            if expected is None:
                if w is not None:
                    raise ConfigError(f"layer {i} ({spec.kind}) has no trainable weights")
            elif w is not None and tuple(w.shape) != expected:
                raise ConfigError(f"layer {i} weights {w.shape} != expected {expected}")

    @property
    def output_index(self) -> int:
        return len(self.layers) - 1

    def size(self, i: int) -> int:
        return int(np.prod(self.shapes[i]))

    def params(self, i: int) -> NeuronParams:
        p = self.layers[i].params
        if p is None:
            raise ConfigError(f"layer {i} has no neuron parameters")
        return p

    def weight_shape(self, i: int) -> Optional[tuple]:
        spec = self.layers[i]
        if spec.kind == "dense":
            return (spec.size, self.size(i - 1))
        if spec.kind == "conv":
            return (spec.size, self.shapes[i - 1][0], spec.kernel, spec.kernel)
        return None

    def trainable_indices(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.trainable]

    def init_weights(self, rng: np.random.Generator) -> None:
        """Uniform U[-a, a] initialisation; a = 1 (dense) or 0.5 (conv)."""
        for i in self.trainable_indices():
            a = INIT_SCALE[self.layers[i].kind]
            self.weights[i] = rng.uniform(-a, a, size=self.weight_shape(i))

    def copy(self) -> "Network":
        return Network(list(self.layers), [None if w is None else w.copy() for w in self.weights])


def _infer_shapes(layers: Sequence[LayerSpec]) -> list:
    shapes = [tuple(int(d) for d in layers[0].shape)]
    for i, spec in enumerate(layers[1:], start=1):
        prev = shapes[-1]
        if spec.kind == "dense":
            shapes.append((spec.size,))
        elif spec.kind == "conv":
            if len(prev) != 3:
                raise ConfigError(f"conv layer {i} needs a (C, H, W) input, got {prev}")
            c, h, w = prev
            k = spec.kernel
            if h < k or w < k:
                raise ConfigError(f"conv layer {i}: kernel {k} larger than input {h}x{w}")
            shapes.append((spec.size, h - k + 1, w - k + 1))
        elif spec.kind == "pool":
            if len(prev) != 3:
                raise ConfigError(f"pool layer {i} needs a (C, H, W) input, got {prev}")
            c, h, w = prev
            if h % 2 or w % 2:
                raise ConfigError(f"pool layer {i}: input {h}x{w} not divisible by 2")
            shapes.append((c, h // 2, w // 2))
    return shapes


def dense_network(sizes: Sequence[int], params: Sequence[NeuronParams],
                  lateral_w0: Optional[float] = None,
                  rng: Optional[np.random.Generator] = None) -> Network:
    """Fully connected network ``sizes[0] - ... - sizes[-1]``.

    ``params`` has one entry per non-input layer.
    """
    if len(params) != len(sizes) - 1:
        raise ConfigError("need one NeuronParams per non-input layer")
    layers = [LayerSpec("input", shape=(sizes[0],))]
    for k, (n, p) in enumerate(zip(sizes[1:], params)):
        last = k == len(sizes) - 2
        layers.append(LayerSpec("dense", size=n, params=p,
                                lateral_w0=lateral_w0 if last else None))
    net = Network(layers)
    if rng is not None:
        net.init_weights(rng)
    return net
