"""Network description files and binary weight checkpoints.

Network file grammar (one statement per line, ``#`` starts a comment)::

    defaults  [tau_m=<ms>] [tau_s=<ms>]
    input     shape=<d>[x<d>...]
    conv      channels=<int> [kernel=5] [threshold=<nu>] [tau_m=..] [tau_s=..]
    pool      [threshold=<nu>] [tau_m=..] [tau_s=..]
    dense     n=<int> [threshold=<nu>] [lateral_w0=<w0>] [tau_m=..] [tau_s=..]

Time constants default to 64 and 8 grid steps. Thresholds default to 5 for
conv and pool layers, 10 for hidden dense layers and 20 for the output layer.

Checkpoint layout (little-endian)::

    b"HM2B" | version u32 | n_arrays u32
    per trainable layer, in topology order:
        layer_index u32 | ndim u32 | dims u32 * ndim | float64 data (C order)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DEFAULT_THRESHOLDS, ConfigError, LayerSpec, Network, NeuronParams

CHECKPOINT_MAGIC = b"HM2B"
CHECKPOINT_VERSION = 1

_KEYS = {
    "defaults": {"tau_m", "tau_s"},
    "input": {"shape"},
    "conv": {"channels", "kernel", "threshold", "tau_m", "tau_s"},
    "pool": {"threshold", "tau_m", "tau_s"},
    "dense": {"n", "threshold", "lateral_w0", "tau_m", "tau_s"},
}


def _parse_line(line: str, lineno: int):
    parts = line.split()
    kind = parts[0]
    if kind not in _KEYS:
        raise ConfigError(f"line {lineno}: unknown statement {kind!r}")
    kv = {}
    for tok in parts[1:]:
        if "=" not in tok:
            raise ConfigError(f"line {lineno}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if k not in _KEYS[kind]:
            raise ConfigError(f"line {lineno}: key {k!r} not valid for {kind}")
        kv[k] = v
    return kind, kv


def parse_network(text: str, dt_ms: float) -> Network:
    """Build an (uninitialised) :class:`Network` from a network description."""
    stmts = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            stmts.append((lineno,) + _parse_line(line, lineno))
    tau_m, tau_s = 64.0 * dt_ms, 8.0 * dt_ms
    layer_stmts = []
    for lineno, kind, kv in stmts:
        if kind == "defaults":
            tau_m = float(kv.get("tau_m", tau_m))
            tau_s = float(kv.get("tau_s", tau_s))
        else:
            layer_stmts.append((lineno, kind, kv))
    if not layer_stmts:
        raise ConfigError("network description has no layers")

    layers = []
    for pos, (lineno, kind, kv) in enumerate(layer_stmts):
        try:
            if kind == "input":
                if "shape" not in kv:
                    raise ConfigError(f"line {lineno}: input needs shape=")
                shape = tuple(int(d) for d in kv["shape"].split("x"))
                layers.append(LayerSpec("input", shape=shape))
                continue
            is_output = pos == len(layer_stmts) - 1
            default_nu = DEFAULT_THRESHOLDS["output" if is_output else kind]
            params = NeuronParams(float(kv.get("tau_m", tau_m)), float(kv.get("tau_s", tau_s)),
                                  float(kv.get("threshold", default_nu)))
            if kind == "conv":
                layers.append(LayerSpec("conv", size=int(kv["channels"]),
                                        kernel=int(kv.get("kernel", 5)), params=params))
            elif kind == "pool":
                layers.append(LayerSpec("pool", params=params))
            else:
                w0 = kv.get("lateral_w0")
                layers.append(LayerSpec("dense", size=int(kv["n"]), params=params,
                                        lateral_w0=None if w0 is None else float(w0)))
        except KeyError as exc:
            raise ConfigError(f"line {lineno}: missing key {exc.args[0]}") from None
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return Network(layers)


def load_network(path, dt_ms: float) -> Network:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"network file not found: {p}")
    return parse_network(p.read_text(), dt_ms)


def format_network(net: Network) -> str:
    lines = []
    for spec in net.layers:
        if spec.kind == "input":
            lines.append("input shape=" + "x".join(str(d) for d in spec.shape))
            continue
        p = spec.params
        common = f"threshold={p.threshold:g} tau_m={p.tau_m:g} tau_s={p.tau_s:g}"
        if spec.kind == "conv":
            lines.append(f"conv channels={spec.size} kernel={spec.kernel} {common}")
        elif spec.kind == "pool":
            lines.append(f"pool {common}")
        else:
            extra = "" if spec.lateral_w0 is None else f" lateral_w0={spec.lateral_w0:g}"
            lines.append(f"dense n={spec.size} {common}{extra}")
    return "\n".join(lines) + "\n"


def save_checkpoint(path, net: Network) -> None:
    idx = net.trainable_indices()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(idx)))
        for i in idx:
            w = np.ascontiguousarray(net.weights[i], dtype="<f8")
            fh.write(struct.pack("<II", i, w.ndim))
            fh.write(struct.pack(f"<{w.ndim}I", *w.shape))
            fh.write(w.tobytes())


def load_checkpoint(path, net: Optional[Network] = None) -> list:
    """Read checkpoint weights.

    Returns a list aligned with ``net.layers`` when ``net`` is given (after
    checking every shape), otherwise ``(layer_index, array)`` pairs.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not an HM2B checkpoint")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    arrays = []
    try:
        for _ in range(n):
            i, ndim = struct.unpack_from("<II", raw, off)
            off += 8
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(dims))
            w = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims).astype(float)
            off += 8 * count
            arrays.append((i, w))
    except (struct.error, ValueError) as exc:
        raise ConfigError(f"{path}: truncated checkpoint") from exc
    if net is None:
        return arrays
    if [i for i, _ in arrays] != net.trainable_indices():
        raise ConfigError(f"{path}: checkpoint layers {[i for i, _ in arrays]} do not match "
                          f"topology {net.trainable_indices()}")
    weights = [None] * len(net.layers)
    for i, w in arrays:
        if w.shape != net.weight_shape(i):
            raise ConfigError(f"{path}: layer {i} shape {w.shape} != {net.weight_shape(i)}")
        weights[i] = w
    return weights
