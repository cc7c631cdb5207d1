"""Adam updates, exponential weight regularisation and error-driven sample
reweighting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NumericalError


@dataclass
class AdamState:
    """Moment estimates for every weight array (``None`` slots are skipped)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def like(cls, weights, **kw) -> "AdamState":
        m = [None if w is None else np.zeros_like(w) for w in weights]
        v = [None if w is None else np.zeros_like(w) for w in weights]
        return cls(m=m, v=v, **kw)


def adam_step(state: AdamState, grads, weights) -> list:
    """One bias-corrected Adam update.

    ``state`` is advanced in place; the updated weights are returned as new
    arrays.
    """
    if len(grads) != len(weights) or len(state.m) != len(weights):
        raise ValueError("grads, weights and optimiser state must align")
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient passed to Adam")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for k, (g, w) in enumerate(zip(grads, weights)):
        if w is None or g is None:
            out.append(w)
            continue
        if g.shape != w.shape:
            raise ValueError(f"gradient {g.shape} does not match weights {w.shape}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        out.append(w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def exp_weight_regularize(weights, lam: float, beta: float):
    """Gradient of the exponential weight penalty: ``lam * sign(w) * exp(beta |w|)``."""
    if lam < 0 or beta < 0:
        raise ValueError("lambda and beta must be non-negative")
    w = np.asarray(weights, dtype=float)
    if lam == 0:
        return np.zeros_like(w)
    return lam * np.sign(w) * np.exp(beta * np.abs(w))


@dataclass
class SampleWeights:
    """Per-sample loss multipliers, all in ``[1, cap]``."""

    values: np.ndarray
    factor: float = 2.0
    cap: float = 4.0

    @classmethod
    def ones(cls, n: int, factor: float = 2.0, cap: float = 4.0) -> "SampleWeights":
        return cls(np.ones(n), factor, cap)

    def __getitem__(self, i):
        return self.values[i]


def reweight_samples(correct, factor: float = 2.0, cap: float = 4.0) -> SampleWeights:
    """Multiplier ``factor`` (clipped to ``cap``) for samples misclassified in
    the previous epoch, 1 for the rest."""
    if factor < 1.0 or cap < 1.0:
        raise ValueError("factor and cap must be >= 1")
    correct = np.asarray(correct, dtype=bool)
    vals = np.where(correct, 1.0, min(factor, cap))
    return SampleWeights(vals, factor, cap)
