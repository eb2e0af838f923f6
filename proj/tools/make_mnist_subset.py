#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the 5000-image sample bundled
with the mlxtend wheel (500 images per digit, drawn from the MNIST training set).

The images are shuffled with a fixed seed and split into a 4500-image training
file and a 500-image test file:

    python3 tools/make_mnist_subset.py --out data/mnist-5k

The wheel is fetched with `pip download` when --wheel is not given.
"""
import argparse
import glob
import gzip
import io
import os
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np


def find_wheel(path):
    if path:
        return path
    tmp = tempfile.mkdtemp()
    subprocess.check_call([sys.executable, "-m", "pip", "download", "mlxtend",
                           "--no-deps", "-d", tmp])
    return glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel", default=None)
    ap.add_argument("--out", default="data/mnist-5k")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--test", type=int, default=500)
    args = ap.parse_args()

    with zipfile.ZipFile(find_wheel(args.wheel)) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)

    order = np.random.RandomState(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    n_train = len(labels) - args.test

    os.makedirs(args.out, exist_ok=True)
    for name, sl in (("train", slice(0, n_train)), ("t10k", slice(n_train, None))):
        im, lb = images[sl], labels[sl]
        write_idx(os.path.join(args.out, f"{name}-images-idx3-ubyte.gz"),
                  0x00000803, (len(lb), 28, 28), im.tobytes())
        write_idx(os.path.join(args.out, f"{name}-labels-idx1-ubyte.gz"),
                  0x00000801, (len(lb),), lb.tobytes())
        print(f"{name}: {len(lb)} images, label counts {np.bincount(lb, minlength=10).tolist()}")


if __name__ == "__main__":
    main()
