import json

import numpy as np
import pytest

from hm2bp.core import ConfigError, TimeGrid
from hm2bp.data import StaticDataset, write_idx
from hm2bp.io import load_checkpoint, parse_network
from hm2bp.train import (RunConfig, build_datasets, evaluate, evaluate_checkpoint,
                         load_run_config, parse_run_config, predict, read_metrics, train)

from oracles import binomial_accepts

NET = "input shape=8x8\ndense n=20 threshold=10\ndense n=4 threshold=10 lateral_w0=-1\n"


def _toy(rng, n, seed=0, grid=TimeGrid(100.0, 1.0)):
    """Four classes, each lighting one quadrant of an 8x8 image."""
    labels = np.arange(n) % 4
    images = rng.integers(0, 40, (n, 8, 8)).astype(np.uint8)
    for k, c in enumerate(labels):
        r, q = divmod(int(c), 2)
        images[k, 4 * r:4 * r + 4, 4 * q:4 * q + 4] = 255
    return StaticDataset(images, labels, grid, seed)


def _setup(tmp_path, rng, n_train=100, n_test=40, **kw):
    (tmp_path / "net.net").write_text(NET)
    cfg = RunConfig(network=str(tmp_path / "net.net"), duration_ms=100.0, epochs=1, batch_size=10,
                    checkpoint=str(tmp_path / "ck.hm2b"), metrics_log=str(tmp_path / "m.jsonl"),
                    target_hi=12.0, target_lo=2.0, lr=1e-2)
    for k, v in kw.items():
        setattr(cfg, k, v)
    tr = _toy(rng, n_train, 0)
    te = _toy(np.random.default_rng(99), n_test, 1_000_003)
    net = parse_network(NET, 1.0)
    net.init_weights(np.random.default_rng(cfg.seed))
    return cfg, net, tr, te


def test_zero_epochs_only_initial_evaluation(tmp_path, rng):
    cfg, net, tr, te = _setup(tmp_path, rng, epochs=0)
    w0 = [None if w is None else w.copy() for w in net.weights]
    res = train(cfg, net, tr, te)
    assert [h["epoch"] for h in res.history] == [0]
    assert all((a is None and b is None) or np.array_equal(a, b) for a, b in zip(w0, res.net.weights))


def test_tiny_run_finite_loss_and_metrics(tmp_path, rng):
    cfg, net, tr, te = _setup(tmp_path, rng)
    res = train(cfg, net, tr, te)
    assert np.isfinite(res.history[-1]["train_loss"])
    lines = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert lines[0]["type"] == "config" and lines[0]["lr"] == cfg.lr
    recs = read_metrics(tmp_path / "m.jsonl")
    assert [r["epoch"] for r in recs] == [0, 1]
    assert all(0 <= r["test_acc"] <= 1 for r in recs)
    assert len(recs[1]["grad_norms"]) == len(net.layers)


def test_training_learns_toy_task(tmp_path, rng):
    cfg, net, tr, te = _setup(tmp_path, rng, epochs=3, lr=3e-2)
    # excitatory bias: a silent output layer receives no gradient at all
    net.weights[1] += 0.5
    net.weights[2] += 0.5
    res = train(cfg, net, tr, te)
    assert res.history[-1]["train_loss"] < res.history[1]["train_loss"]
    assert res.history[-1]["test_acc"] >= 0.75


def test_same_seed_same_history(tmp_path, rng):
    runs = []
    for k in range(2):
        d = tmp_path / str(k)
        d.mkdir()
        cfg, net, tr, te = _setup(d, np.random.default_rng(5), epochs=2)
        runs.append([{k2: v for k2, v in h.items() if k2 != "wall_s"}
                     for h in train(cfg, net, tr, te).history])
    assert runs[0] == runs[1]


def test_workers_match_single_worker(tmp_path, rng):
    hist = []
    for w in (1, 2):
        d = tmp_path / f"w{w}"
        d.mkdir()
        cfg, net, tr, te = _setup(d, np.random.default_rng(6), n_train=40, workers=w)
        res = train(cfg, net, tr, te)
        hist.append((res.history[-1]["train_loss"], res.history[-1]["test_acc"],
                     [None if x is None else x.tobytes() for x in res.net.weights]))
    assert hist[0] == hist[1]


def test_evaluate_reproduces_logged_accuracy(tmp_path, rng):
    cfg, net, tr, te = _setup(tmp_path, rng)
    res = train(cfg, net, tr, te)
    fresh = parse_network(NET, 1.0)
    fresh.weights = load_checkpoint(res.checkpoint, fresh)
    a, b = evaluate(fresh, te), evaluate(fresh, te)
    assert a.accuracy == b.accuracy == res.history[-1]["test_acc"]
    assert np.array_equal(a.confusion, b.confusion) and a.confusion.sum() == len(te)


def test_untrained_net_is_at_chance(rng):
    net = parse_network("input shape=8x8\ndense n=20\ndense n=10\n", 1.0)
    net.init_weights(np.random.default_rng(1))
    ds = _toy(rng, 400)
    ds.labels = rng.integers(0, 10, 400)  # labels independent of the inputs
    res = evaluate(net, ds)
    assert binomial_accepts(int(round(res.accuracy * 400)), 400, 0.1)


def test_predict_ties_lowest_index():
    assert predict([0, 3, 3, 1]) == 1
    assert predict([0, 0, 0]) == 0


def test_config_parsing_and_overrides(tmp_path, monkeypatch):
    monkeypatch.delenv("HM2BP_DATA_DIR", raising=False)
    (tmp_path / "c.cfg").write_text("# run\nnetwork = a.net\nepochs = 3\nlr=0.01  # fast\n"
                                    "train_n = all\nlateral = off\n")
    cfg = load_run_config(tmp_path / "c.cfg", {"seed": "7"})
    assert cfg.epochs == 3 and cfg.lr == 0.01 and cfg.seed == 7
    assert cfg.train_n is None and cfg.lateral is False
    assert cfg.network == str(tmp_path / "a.net") and cfg.data_dir == str(tmp_path / "data")
    monkeypatch.setenv("HM2BP_DATA_DIR", "/elsewhere")
    assert load_run_config(tmp_path / "c.cfg").data_dir == "/elsewhere"
    assert load_run_config(tmp_path / "c.cfg", {"data_dir": "/x"}).data_dir == "/x"


@pytest.mark.parametrize("text", ["epochs = many\n", "bogus = 1\n", "epochs\n", "dataset = cifar\n",
                                  "target_hi = 1\ntarget_lo = 5\n"])
def test_config_errors(tmp_path, text):
    (tmp_path / "c.cfg").write_text(text)
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "c.cfg")


def test_build_datasets_from_idx(tmp_path, rng):
    root = tmp_path / "mnist"
    root.mkdir()
    for stem, n in (("train", 30), ("t10k", 12)):
        write_idx(root / f"{stem}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28)))
        write_idx(root / f"{stem}-labels-idx1-ubyte.gz", rng.integers(0, 10, n))
    cfg = parse_run_config("train_n = 20\ntest_n = 5\n")
    cfg.data_dir = str(tmp_path)
    tr, te = build_datasets(cfg)
    assert (len(tr), len(te)) == (20, 5) and tr.seed != te.seed
    cfg.full_data = True
    assert [len(d) for d in build_datasets(cfg)] == [30, 12]


def test_evaluate_checkpoint(tmp_path, rng):
    root = tmp_path / "data" / "mnist"
    root.mkdir(parents=True)
    for stem, n in (("train", 10), ("t10k", 10)):
        write_idx(root / f"{stem}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28)))
        write_idx(root / f"{stem}-labels-idx1-ubyte", rng.integers(0, 10, n))
    (tmp_path / "n.net").write_text("input shape=784\ndense n=10\n")
    (tmp_path / "c.cfg").write_text("network = n.net\nepochs = 1\nbatch_size = 5\n"
                                    "duration_ms = 50\ncheckpoint = ck\nmetrics_log = m\n")
    cfg = load_run_config(tmp_path / "c.cfg", {"data_dir": str(tmp_path / "data")})
    res = train(cfg)
    assert evaluate_checkpoint(res.checkpoint, cfg).accuracy == res.history[-1]["test_acc"]
