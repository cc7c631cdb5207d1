"""
Training a spiking MLP on the MNIST sample
==========================================

Uses the 4000/1000 digit split written by ``prepare_mnist_sample.py`` and
the shipped 784-400-10 network. On one CPU core an epoch over 4000 digits
takes several minutes.

    python3 demos/train_mnist_sample.py [epochs] [train_n]
"""

import logging
import sys
from pathlib import Path

from hm2bp import load_run_config, train

root = Path(__file__).resolve().parent.parent
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
train_n = sys.argv[2] if len(sys.argv) > 2 else "4000"

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
cfg = load_run_config(root / "configs" / "mnist.cfg", {
    "data_dir": str(root / "data" / "sample"), "epochs": str(epochs),
    "train_n": train_n, "test_n": "1000",
    "checkpoint": str(root / "runs" / "sample" / "checkpoint.hm2b"),
    "metrics_log": str(root / "runs" / "sample" / "metrics.jsonl")})
result = train(cfg)
for rec in result.history:
    print(f"epoch {rec['epoch']:2d}  test accuracy {rec['test_acc']:.4f}")
