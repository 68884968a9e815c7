#!/usr/bin/env python3
"""Populate the dataset cache directory used by the walknoise loaders.

Layout written under DATA_DIR (default: $WALKNOISE_DATA or ./data):

    mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte
    fashion/{train,t10k}-{images-idx3,labels-idx1}-ubyte
    cifar10/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin

Sources:
    --source official   download the original archives (needs network access)
    --source mlxtend    build an IDX-format MNIST subset (5000 real MNIST digits,
                        4000 train / 1000 test) from the copy bundled in the
                        `mlxtend` wheel on PyPI; used where only a package mirror
                        is reachable. CIFAR-10 has no such fallback.
"""

import argparse
import gzip
import io
import os
import random
import struct
import subprocess
import sys
import tarfile
import tempfile
import urllib.request
import zipfile

MNIST_URLS = {
    "mnist": "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "fashion": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
}
MNIST_FILES = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
]
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"


def write_idx_images(path, images, rows, cols):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def fetch_official(data_dir):
    for variant, base in MNIST_URLS.items():
        out = os.path.join(data_dir, variant)
        os.makedirs(out, exist_ok=True)
        for name in MNIST_FILES:
            target = os.path.join(out, name)
            if os.path.exists(target):
                continue
            print(f"fetching {base}{name}.gz")
            with urllib.request.urlopen(base + name + ".gz") as r:
                data = gzip.decompress(r.read())
            with open(target, "wb") as f:
                f.write(data)
    out = os.path.join(data_dir, "cifar10")
    if not os.path.isdir(os.path.join(out, "cifar-10-batches-bin")):
        os.makedirs(out, exist_ok=True)
        print(f"fetching {CIFAR_URL}")
        with urllib.request.urlopen(CIFAR_URL) as r:
            blob = r.read()
        with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
            tar.extractall(out)


def fetch_mlxtend(data_dir):
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "mlxtend==0.24.0",
             "--no-deps", "-q", "-d", tmp]
        )
        wheel = [f for f in os.listdir(tmp) if f.endswith(".whl")][0]
        with zipfile.ZipFile(os.path.join(tmp, wheel)) as z:
            raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    rows = []
    for line in raw.decode().splitlines():
        vals = [int(float(v)) for v in line.split(",")]
        rows.append((vals[:-1], vals[-1]))
    random.Random(0).shuffle(rows)
    train, test = rows[:4000], rows[4000:]
    out = os.path.join(data_dir, "mnist")
    os.makedirs(out, exist_ok=True)
    for prefix, part in (("train", train), ("t10k", test)):
        write_idx_images(os.path.join(out, f"{prefix}-images-idx3-ubyte"),
                         [img for img, _ in part], 28, 28)
        write_idx_labels(os.path.join(out, f"{prefix}-labels-idx1-ubyte"),
                         [lab for _, lab in part])
    print(f"wrote {len(train)} train / {len(test)} test MNIST digits to {out}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dir", default=os.environ.get("WALKNOISE_DATA", "data"))
    ap.add_argument("--source", choices=["official", "mlxtend"], default="official")
    args = ap.parse_args()
    os.makedirs(args.dir, exist_ok=True)
    if args.source == "official":
        fetch_official(args.dir)
    else:
        fetch_mlxtend(args.dir)


if __name__ == "__main__":
    main()
