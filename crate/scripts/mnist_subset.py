#!/usr/bin/env python3
"""Write a 5 000-digit MNIST subset as standard IDX files.

Offline environments cannot reach the canonical MNIST mirrors. The mlxtend
wheel ships 5 000 original MNIST digits (500 per class); this script pulls
that CSV out of the wheel and writes

    train-images-idx3-ubyte / train-labels-idx1-ubyte   (4 000 digits)
    t10k-images-idx3-ubyte  / t10k-labels-idx1-ubyte    (1 000 digits)

Classes are interleaved so every prefix of either split is near-stratified.

usage: pip download --no-deps -d /tmp/wheels mlxtend
       python3 scripts/mnist_subset.py /tmp/wheels/mlxtend-*.whl data/mnist
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for r in rows:
            f.write(bytes(r))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    wheel, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    by_class = {c: [] for c in range(10)}
    for line in gzip.decompress(raw).decode().strip().split("\n"):
        vals = [int(float(v)) for v in line.split(",")]
        by_class[vals[-1]].append(vals[:-1])
    train, test = [], []
    for i in range(500):
        for c in range(10):
            (train if i < 400 else test).append((by_class[c][i], c))
    for name, split in (("train", train), ("t10k", test)):
        write_images(out / f"{name}-images-idx3-ubyte", [r for r, _ in split])
        write_labels(out / f"{name}-labels-idx1-ubyte", [c for _, c in split])
        print(f"{name}: {len(split)} digits")


if __name__ == "__main__":
    main()
