"""Training loop, evaluation, run configuration and metrics logging."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import data as D
from .core import ConfigError, DataError, Network, TimeGrid
from .grad import GradientBundle, backward_pass, log_diagnostics, loss
from .io import load_checkpoint, load_network, save_checkpoint
from .lif import forward_pass
from .optim import AdamState, SampleWeights, adam_step, exp_weight_regularize, reweight_samples

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Everything needed to reproduce a run. Paths are relative to the
    directory of the config file they were read from."""

    dataset: str = "mnist"
    network: str = ""
    data_dir: str = "data"
    duration_ms: float = 400.0
    dt_ms: float = 1.0
    poisson_scale: float = 0.5
    emnist_transpose: bool = True
    cache: str = ""
    target_hi: float = 35.0
    target_lo: float = 5.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reg_lambda: float = 0.0
    reg_beta: float = 1.0
    reweight_factor: float = 2.0
    reweight_cap: float = 4.0
    lateral: bool = True
    epochs: int = 20
    batch_size: int = 100
    seed: int = 0
    train_n: Optional[int] = 10000
    test_n: Optional[int] = 2000
    full_data: bool = False
    checkpoint: str = "checkpoint.hm2b"
    checkpoint_every: int = 1
    metrics_log: str = "metrics.jsonl"
    workers: int = 1
    deterministic: bool = True
    verbose: bool = False

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.duration_ms, self.dt_ms)

    def validate(self) -> "RunConfig":
        if self.dataset not in ("mnist", "nmnist", "emnist"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and workers >= 1 required")
        if not self.target_hi > self.target_lo >= 0:
            raise ConfigError("need target_hi > target_lo >= 0")
        self.grid  # validates the time grid
        return self

    def set(self, key: str, value) -> None:
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(self, key, _coerce(fields[key].type, value, key))


def _coerce(typ, value, key):
    if not isinstance(value, str):
        return value
    v = value.strip()
    typ = str(typ)
    try:
        if "Optional" in typ and v.lower() in ("none", "all", ""):
            return None
        if "bool" in typ:
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if "int" in typ:
            return int(v)
        if "float" in typ:
            return float(v)
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None
    return v


def parse_run_config(text: str, base_dir=".") -> RunConfig:
    """``key = value`` lines; ``#`` starts a comment."""
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        cfg.set(k, v)
    base = Path(base_dir)
    for key in ("network", "data_dir", "cache", "checkpoint", "metrics_log"):
        val = getattr(cfg, key)
        if val and not Path(val).is_absolute():
            setattr(cfg, key, os.path.normpath(base / val))
    return cfg


def load_run_config(path, overrides: Optional[dict] = None) -> RunConfig:
    """Read a config file; ``HM2BP_DATA_DIR`` then ``overrides`` take precedence."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    cfg = parse_run_config(p.read_text(), p.parent)
    env = os.environ.get("HM2BP_DATA_DIR")
    if env:
        cfg.data_dir = env
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg.validate()


# ---------------------------------------------------------------------------
# datasets


def _first_existing(*paths: Path) -> Path:
    for p in paths:
        if p.exists():
            return p
        gz = p.with_name(p.name + ".gz")
        if gz.exists():
            return gz
    raise DataError(f"dataset file not found: {paths[0]} (set data_dir or HM2BP_DATA_DIR)")


def _idx_split(root: Path, stem: str, transpose: bool, cfg: RunConfig) -> D.StaticDataset:
    img = _first_existing(root / f"{stem}-images-idx3-ubyte", root / f"{stem}-images.idx3-ubyte")
    lab = _first_existing(root / f"{stem}-labels-idx1-ubyte", root / f"{stem}-labels.idx1-ubyte")
    samples = D.load_idx(img, lab, transpose=transpose)
    images = np.stack([s.pixels for s in samples])
    labels = np.array([s.label for s in samples])
    return D.StaticDataset(images, labels, cfg.grid, cfg.seed, cfg.poisson_scale)


def _nmnist_split(root: Path, cfg: RunConfig, limit: Optional[int]) -> D.EventDataset:
    if not root.is_dir():
        raise DataError(f"N-MNIST directory not found: {root}")
    per_class = [sorted((root / str(c)).glob("*.bin")) for c in range(10)]
    if not any(per_class):
        raise DataError(f"no N-MNIST samples under {root}")
    # interleave classes so that subsets stay balanced
    files = []
    depth = max(len(f) for f in per_class)
    for k in range(depth):
        for c in range(10):
            if k < len(per_class[c]):
                files.append(per_class[c][k])
    if limit is not None:
        files = files[:limit]
    reduction = int(round(cfg.dt_ms * 1000))
    return D.EventDataset([D.load_nmnist(f) for f in files], cfg.grid, reduction)


def build_datasets(cfg: RunConfig):
    """Train and test datasets (subset to ``train_n``/``test_n`` unless ``full_data``)."""
    root = Path(cfg.data_dir)
    train_n = None if cfg.full_data else cfg.train_n
    test_n = None if cfg.full_data else cfg.test_n
    if cfg.dataset == "mnist":
        tr = _idx_split(root / "mnist", "train", False, cfg)
        te = _idx_split(root / "mnist", "t10k", False, cfg)
    elif cfg.dataset == "emnist":
        tr = _idx_split(root / "emnist", "emnist-balanced-train", cfg.emnist_transpose, cfg)
        te = _idx_split(root / "emnist", "emnist-balanced-test", cfg.emnist_transpose, cfg)
    else:
        tr = _nmnist_split(root / "nmnist" / "Train", cfg, train_n)
        te = _nmnist_split(root / "nmnist" / "Test", cfg, test_n)
    if cfg.cache:
        tr = D.CachedDataset(cfg.cache)
    tr, te = D.subset(tr, train_n), D.subset(te, test_n)
    # the test split is encoded with a disjoint seed stream
    if isinstance(te, D.StaticDataset):
        te.seed = cfg.seed + 1_000_003
    return tr, te


def build_network(cfg: RunConfig) -> Network:
    if not cfg.network:
        raise ConfigError("config has no network file")
    net = load_network(cfg.network, cfg.dt_ms)
    net.init_weights(np.random.default_rng(cfg.seed))
    return net


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # [true, predicted]
    predictions: np.ndarray


def predict(counts) -> int:
    """Index of the largest output count; ties go to the lowest index."""
    return int(np.argmax(counts))


def evaluate(net: Network, dataset, grid: Optional[TimeGrid] = None,
             n_classes: Optional[int] = None) -> EvalResult:
    grid = grid or dataset.grid
    n_classes = n_classes or net.size(net.output_index)
    preds = np.zeros(len(dataset), dtype=int)
    conf = np.zeros((n_classes, n_classes), dtype=int)
    for s in range(len(dataset)):
        fwd = forward_pass(net, dataset.raster(s), grid, tables=False)
        preds[s] = predict(fwd.output_counts)
        conf[dataset.labels[s], preds[s]] += 1
    acc = float(np.mean(preds == dataset.labels)) if len(dataset) else 0.0
    return EvalResult(acc, conf, preds)


def evaluate_checkpoint(checkpoint, cfg: RunConfig) -> EvalResult:
    net = build_network(cfg)
    net.weights = load_checkpoint(checkpoint, net)
    _, te = build_datasets(cfg)
    return evaluate(net, te, cfg.grid)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    history: list
    net: Network
    checkpoint: Optional[str] = None


def _sample_step(net, dataset, s, grid, targets, weight, lateral):
    fwd = forward_pass(net, dataset.raster(s), grid)
    bundle = backward_pass(net, fwd, targets, sample_weight=weight, lateral=lateral)
    o = fwd.output_counts
    return bundle.grads, loss(o, targets), predict(o) == dataset.labels[s]


_WORKER = {}


def _worker_init(dataset, grid, lateral):
    _WORKER.update(dataset=dataset, grid=grid, lateral=lateral)


def _worker_run(net, jobs):
    out = []
    for s, targets, weight in jobs:
        out.append(_sample_step(net, _WORKER["dataset"], s, _WORKER["grid"], targets, weight,
                                _WORKER["lateral"]))
    return out


def batch_gradient(net: Network, dataset, indices, targets_fn, sample_weights, grid,
                   lateral=True, pool=None):
    """Average per-sample gradients over a batch.

    Per-sample results are reduced in batch order, so the sum is the same
    whether or not a worker pool is used.
    """
    jobs = [(int(s), targets_fn(int(s)), float(sample_weights[s])) for s in indices]
    if pool is None:
        results = [_sample_step(net, dataset, s, grid, y, w, lateral) for s, y, w in jobs]
    else:
        n = pool._max_workers
        chunks = [jobs[k::n] for k in range(n)]
        parts = list(pool.map(_worker_run, [net] * n, chunks))
        results = [None] * len(jobs)
        for k, part in enumerate(parts):
            results[k::n] = part
    total = [None if g is None else np.zeros_like(g) for g in results[0][0]]
    losses, correct = [], []
    for grads, l, ok in results:
        for k, g in enumerate(grads):
            if g is not None:
                total[k] += g
        losses.append(l)
        correct.append(ok)
    inv = 1.0 / len(jobs)
    return [None if g is None else g * inv for g in total], losses, correct


def train(cfg: RunConfig, net: Optional[Network] = None, train_set=None, test_set=None,
          on_epoch: Optional[Callable] = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of forward / backward / Adam.

    Epoch 0 in the history is the evaluation of the initial weights. Datasets
    and network are built from ``cfg`` unless passed in. ``on_epoch(epoch, net)``
    is called after every epoch's evaluation.
    """
    cfg.validate()
    grid = cfg.grid
    if train_set is None or test_set is None:
        tr, te = build_datasets(cfg)
        train_set = train_set or tr
        test_set = test_set or te
    if net is None:
        net = build_network(cfg)
    n_classes = net.size(net.output_index)
    log.info("run config: %s", json.dumps(dataclasses.asdict(cfg), sort_keys=True))

    metrics_path = Path(cfg.metrics_log) if cfg.metrics_log else None
    if metrics_path:
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps({"type": "config", **dataclasses.asdict(cfg)}) + "\n")

    def emit(rec):
        history.append(rec)
        log.info("epoch %d: %s", rec["epoch"], {k: v for k, v in rec.items() if k != "grad_norms"})
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps({"type": "epoch", **rec}) + "\n")

    def targets_fn(s):
        return D.make_targets(int(train_set.labels[s]), n_classes, cfg.target_hi, cfg.target_lo).y

    history = []
    t0 = time.perf_counter()
    test0 = evaluate(net, test_set, grid, n_classes)
    emit({"epoch": 0, "train_loss": None, "train_acc": None, "test_acc": test0.accuracy,
          "wall_s": time.perf_counter() - t0, "grad_norms": None})
    if on_epoch:
        on_epoch(0, net)

    rng = np.random.default_rng(cfg.seed)
    adam = AdamState.like(net.weights, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    sample_w = SampleWeights.ones(len(train_set), cfg.reweight_factor, cfg.reweight_cap)
    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(cfg.workers, initializer=_worker_init,
                                   initargs=(train_set, grid, cfg.lateral))
    ckpt = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_set))
            losses, correct = [], np.zeros(len(train_set), dtype=bool)
            norms = []
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                grads, bl, bc = batch_gradient(net, train_set, idx, targets_fn, sample_w,
                                               grid, cfg.lateral, pool)
                if cfg.reg_lambda > 0:
                    grads = [None if g is None else
                             g + exp_weight_regularize(w, cfg.reg_lambda, cfg.reg_beta)
                             for g, w in zip(grads, net.weights)]
                losses.extend(bl)
                correct[idx] = bc
                norms.append([None if g is None else float(np.linalg.norm(g)) for g in grads])
                if cfg.verbose:
                    log_diagnostics(GradientBundle(grads, [None] * len(grads)), b)
                net.weights = adam_step(adam, grads, net.weights)
            sample_w = reweight_samples(correct, cfg.reweight_factor, cfg.reweight_cap)
            test = evaluate(net, test_set, grid, n_classes)
            mean_norms = [None if col[0] is None else float(np.mean(col))
                          for col in zip(*norms)]
            emit({"epoch": epoch, "train_loss": float(np.mean(losses)),
                  "train_acc": float(np.mean(correct)), "test_acc": test.accuracy,
                  "wall_s": time.perf_counter() - t0, "grad_norms": mean_norms})
            if cfg.checkpoint and (epoch % max(cfg.checkpoint_every, 1) == 0 or epoch == cfg.epochs):
                ckpt = cfg.checkpoint
                save_checkpoint(ckpt, net)
            if on_epoch:
                on_epoch(epoch, net)
    finally:
        if pool is not None:
            pool.shutdown()
    if cfg.checkpoint and ckpt is None:
        ckpt = cfg.checkpoint
        save_checkpoint(ckpt, net)
    return TrainResult(history, net, ckpt)


def read_metrics(path) -> list:
    """Epoch records from a metrics log."""
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("type") == "epoch":
                out.append(rec)
    return out
