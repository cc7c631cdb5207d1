"""Build a small MNIST sample in IDX format for runs without the full dataset.

The 5000 digits bundled with the ``mlxtend`` wheel (500 per class, drawn
from the MNIST training set) are shuffled with a fixed seed and split into
4000 training and 1000 test images, written as gzip IDX files:

    <out>/mnist/train-images-idx3-ubyte.gz   train-labels-idx1-ubyte.gz
    <out>/mnist/t10k-images-idx3-ubyte.gz    t10k-labels-idx1-ubyte.gz

Usage::

    python3 demos/prepare_mnist_sample.py [--out data/sample] [--wheel PATH]

Without ``--wheel`` the wheel is fetched with ``pip download``.
"""

import argparse
import glob
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from hm2bp.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest: str) -> str:
    subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend", "--no-deps",
                    "--only-binary", ":all:", "-q", "-d", dest], check=True)
    return glob.glob(str(Path(dest) / "mlxtend-*.whl"))[0]


def load_csv(wheel: str):
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    # rows are 784 pixels followed by the label
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data" / "sample"))
    ap.add_argument("--wheel")
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        images, labels = load_csv(args.wheel or fetch_wheel(tmp))
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    k = len(labels) - args.n_test
    root = Path(args.out) / "mnist"
    root.mkdir(parents=True, exist_ok=True)
    for stem, sl in (("train", slice(0, k)), ("t10k", slice(k, None))):
        write_idx(root / f"{stem}-images-idx3-ubyte.gz", images[sl])
        write_idx(root / f"{stem}-labels-idx1-ubyte.gz", labels[sl])
        print(f"{stem}: {len(labels[sl])} images, per class {np.bincount(labels[sl]).tolist()}")
    print(f"written to {root}")


if __name__ == "__main__":
    main()
