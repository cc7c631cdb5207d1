"""Dataset readers (IDX, N-MNIST events), spike encoders and target
construction."""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import DataError, SpikeTrain, TimeGrid
from .lif import raster_to_trains

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 2051  # 0x00000803: unsigned byte, 3 dims
IDX_LABELS_MAGIC = 2049  # 0x00000801: unsigned byte, 1 dim
NMNIST_SIDE = 34
NMNIST_CHANNELS = 2 * NMNIST_SIDE * NMNIST_SIDE
NMNIST_REDUCTION = 600  # us per 0.6 ms step
SPKC_MAGIC = b"SPKC"
SPKC_VERSION = 1


@dataclass
class StaticImage:
    pixels: np.ndarray  # (H, W) uint8
    label: int


@dataclass
class EventSample:
    """DVS events; ``polarity`` is 1 for ON and 0 for OFF, ``timestamp`` in us."""

    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray
    timestamp: np.ndarray
    label: int = -1

    def __len__(self):
        return len(self.timestamp)


@dataclass
class TargetCounts:
    y: np.ndarray


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file into an array shaped by its header."""
    raw = _open(path)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08 or ndim == 0:
        raise DataError(f"{path}: bad IDX magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head < n:
        raise DataError(f"{path}: truncated data ({len(raw) - head} of {n} bytes)")
    if len(raw) - head > n:
        raise DataError(f"{path}: {len(raw) - head - n} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (gzip-compressed if the name ends in .gz)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload = header + arr.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def load_idx(images_path, labels_path, transpose: bool = False) -> list:
    """Load an IDX image/label pair (MNIST, EMNIST) as :class:`StaticImage` list.

    ``transpose`` swaps image rows and columns, for EMNIST files whose images
    are stored transposed.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if int.from_bytes(_open(images_path)[:4], "big") != IDX_IMAGES_MAGIC:
        raise DataError(f"{images_path}: expected image magic {IDX_IMAGES_MAGIC}")
    if int.from_bytes(_open(labels_path)[:4], "big") != IDX_LABELS_MAGIC:
        raise DataError(f"{labels_path}: expected label magic {IDX_LABELS_MAGIC}")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if transpose:
        images = images.transpose(0, 2, 1)
    return [StaticImage(img, int(lab)) for img, lab in zip(images, labels)]


def poisson_raster(pixels, grid: TimeGrid, seed: int, scale: float = 0.5) -> np.ndarray:
    """Bernoulli spikes with per-step probability ``scale * intensity / 255``.

    Returns a ``(T, n_pixels)`` 0/1 raster.
    """
    p = scale * np.asarray(pixels, dtype=float).ravel() / 255.0
    rng = np.random.default_rng(seed)
    return (rng.random((grid.n_steps, p.size)) < p).astype(float)


def poisson_encode(image: StaticImage, grid: TimeGrid, seed: int, scale: float = 0.5) -> list:
    """Rate-code every pixel as a spike train (784 trains for MNIST)."""
    return raster_to_trains(poisson_raster(image.pixels, grid, seed, scale), grid.dt_ms)


def sample_seed(global_seed: int, index: int) -> int:
    return int(global_seed) ^ int(index)


# ---------------------------------------------------------------------------
# N-MNIST
#
# Every event is 5 bytes, big-endian bit layout:
#   bits 39-32  x address (0..33)
#   bits 31-24  y address (0..33)
#   bit  23     polarity (1 = ON, 0 = OFF)
#   bits 22-0   timestamp in microseconds


def parse_nmnist(raw: bytes, label: int = -1) -> EventSample:
    if len(raw) % 5:
        raise DataError(f"event stream length {len(raw)} is not a multiple of 5")
    ev = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 5).astype(np.int64)
    x = ev[:, 0]
    y = ev[:, 1]
    pol = ev[:, 2] >> 7
    ts = ((ev[:, 2] & 0x7F) << 16) | (ev[:, 3] << 8) | ev[:, 4]
    if np.any(x >= NMNIST_SIDE) or np.any(y >= NMNIST_SIDE):
        raise DataError("event coordinate outside the 34x34 sensor")
    order = np.argsort(ts, kind="stable")
    return EventSample(x[order], y[order], pol[order], ts[order], label)


def load_nmnist(sample_path, label: Optional[int] = None) -> EventSample:
    """Read one N-MNIST ``.bin`` sample. The label defaults to the name of the
    parent directory when that is a digit."""
    path = Path(sample_path)
    if label is None:
        label = int(path.parent.name) if path.parent.name.isdigit() else -1
    return parse_nmnist(_open(path), label)


def write_nmnist(path, sample: EventSample) -> None:
    ts = np.asarray(sample.timestamp, dtype=np.int64)
    if np.any(ts >= 1 << 23) or np.any(ts < 0):
        raise DataError("timestamps must fit in 23 bits")
    out = np.zeros((len(ts), 5), dtype=np.uint8)
    out[:, 0] = sample.x
    out[:, 1] = sample.y
    out[:, 2] = (np.asarray(sample.polarity) << 7) | ((ts >> 16) & 0x7F)
    out[:, 3] = (ts >> 8) & 0xFF
    out[:, 4] = ts & 0xFF
    Path(path).write_bytes(out.tobytes())


def nmnist_grid(duration_ms: float = 320.0, dt_ms: float = 0.6) -> TimeGrid:
    return TimeGrid(duration_ms, dt_ms)


def nmnist_raster(sample: EventSample, grid: Optional[TimeGrid] = None,
                  reduction: int = NMNIST_REDUCTION) -> np.ndarray:
    """Bin events into a ``(T, 2312)`` 0/1 raster.

    Channel = polarity * 34 * 34 + y * 34 + x; step = floor(timestamp / reduction).
    Several events of one channel in one step collapse into one spike; events
    past the end of the grid are dropped.
    """
    grid = grid or nmnist_grid(dt_ms=reduction / 1000.0)
    T = grid.n_steps
    chan = np.asarray(sample.polarity) * NMNIST_SIDE * NMNIST_SIDE + np.asarray(sample.y) * NMNIST_SIDE + np.asarray(sample.x)
    step = np.asarray(sample.timestamp) // reduction
    keep = step < T
    if not keep.all():
        log.debug("dropping %d events beyond %d steps", int((~keep).sum()), T)
    raster = np.zeros((T, NMNIST_CHANNELS))
    raster[step[keep], chan[keep]] = 1.0
    return raster


def nmnist_to_trains(sample: EventSample, reduction: int = NMNIST_REDUCTION,
                     dt: float = 0.6, grid: Optional[TimeGrid] = None) -> list:
    grid = grid or nmnist_grid(dt_ms=dt)
    return raster_to_trains(nmnist_raster(sample, grid, reduction), dt)


def make_targets(label: int, n_classes: int, hi: float = 35, lo: float = 5) -> TargetCounts:
    """Desired output counts: ``hi`` for the label neuron, ``lo`` elsewhere."""
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} outside [0, {n_classes})")
    if not hi > lo >= 0:
        raise ValueError("need hi > lo >= 0")
    y = np.full(n_classes, float(lo))
    y[label] = hi
    return TargetCounts(y)


# ---------------------------------------------------------------------------
# datasets yielding rasters for the trainer


class StaticDataset:
    """Images Poisson-encoded on demand with a per-sample seed."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, grid: TimeGrid,
                 seed: int = 0, scale: float = 0.5):
        self.images = np.asarray(images)
        self.labels = np.asarray(labels, dtype=int)
        self.grid = grid
        self.seed = seed
        self.scale = scale

    def __len__(self):
        return len(self.labels)

    @property
    def n_inputs(self) -> int:
        return int(np.prod(self.images.shape[1:]))

    def raster(self, i: int) -> np.ndarray:
        return poisson_raster(self.images[i], self.grid, sample_seed(self.seed, i), self.scale)


class EventDataset:
    def __init__(self, samples: Sequence[EventSample], grid: TimeGrid,
                 reduction: int = NMNIST_REDUCTION):
        self.samples = list(samples)
        self.labels = np.array([s.label for s in self.samples], dtype=int)
        self.grid = grid
        self.reduction = reduction

    def __len__(self):
        return len(self.samples)

    n_inputs = NMNIST_CHANNELS

    def raster(self, i: int) -> np.ndarray:
        return nmnist_raster(self.samples[i], self.grid, self.reduction)


class CachedDataset:
    """Rasters read back from a spike cache file."""

    def __init__(self, path):
        self.grid, self.labels, self._trains, self.n_inputs = read_spike_cache(path)

    def __len__(self):
        return len(self.labels)

    def raster(self, i: int) -> np.ndarray:
        raster = np.zeros((self.grid.n_steps, self.n_inputs))
        for j, steps in enumerate(self._trains[i]):
            raster[steps, j] = 1.0
        return raster


def subset(ds, n: Optional[int]):
    """First ``n`` samples of a dataset (a view for static images)."""
    if n is None or n >= len(ds):
        return ds
    if isinstance(ds, StaticDataset):
        return StaticDataset(ds.images[:n], ds.labels[:n], ds.grid, ds.seed, ds.scale)
    if isinstance(ds, EventDataset):
        return EventDataset(ds.samples[:n], ds.grid, ds.reduction)
    if isinstance(ds, CachedDataset):
        out = object.__new__(CachedDataset)
        out.grid, out.n_inputs = ds.grid, ds.n_inputs
        out.labels, out._trains = ds.labels[:n], ds._trains[:n]
        return out
    raise TypeError(f"cannot subset {type(ds).__name__}")


# ---------------------------------------------------------------------------
# spike cache
#
# little-endian layout:
#   b"SPKC" | version u32 | n_samples u32 | n_trains u32 | n_steps u32 | dt f64
#   per sample: label i32 | n_trains x count u32 | all trains' step deltas u32
# each train's steps are delta-encoded (first value absolute).


def write_spike_cache(path, dataset, indices: Optional[Sequence[int]] = None) -> int:
    """Encode ``dataset`` samples into a spike cache file; returns samples written."""
    indices = range(len(dataset)) if indices is None else list(indices)
    grid = dataset.grid
    with open(path, "wb") as fh:
        fh.write(SPKC_MAGIC)
        fh.write(struct.pack("<IIIId", SPKC_VERSION, len(indices), dataset.n_inputs,
                             grid.n_steps, grid.dt_ms))
        for i in indices:
            raster = dataset.raster(i) > 0
            counts = raster.sum(axis=0).astype("<u4")
            _, steps = np.nonzero(raster.T)  # sorted by channel, then step
            deltas = np.diff(steps, prepend=0)
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
            if steps.size:
                first = starts[counts > 0]
                deltas[first] = steps[first]
            fh.write(struct.pack("<i", int(dataset.labels[i])))
            fh.write(counts.tobytes())
            fh.write(deltas.astype("<u4").tobytes())
    return len(indices)


def read_spike_cache(path):
    raw = Path(path).read_bytes()
    if raw[:4] != SPKC_MAGIC:
        raise DataError(f"{path}: not a spike cache")
    version, n, n_trains, n_steps, dt = struct.unpack_from("<IIIId", raw, 4)
    if version != SPKC_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    off = 4 + struct.calcsize("<IIIId")
    labels = np.zeros(n, dtype=int)
    trains = []
    try:
        for s in range(n):
            (labels[s],) = struct.unpack_from("<i", raw, off)
            off += 4
            counts = np.frombuffer(raw, dtype="<u4", count=n_trains, offset=off).astype(np.int64)
            off += 4 * n_trains
            total = int(counts.sum())
            deltas = np.frombuffer(raw, dtype="<u4", count=total, offset=off).astype(np.int64)
            off += 4 * total
            bounds = np.concatenate([[0], np.cumsum(counts)])
            trains.append([np.cumsum(deltas[bounds[j]:bounds[j + 1]]) for j in range(n_trains)])
    except ValueError as exc:
        raise DataError(f"{path}: truncated spike cache") from exc
    return TimeGrid.from_steps(n_steps, dt), labels, trains, n_trains


def data_dir() -> Path:
    return Path(os.environ.get("HM2BP_DATA_DIR", "data"))
