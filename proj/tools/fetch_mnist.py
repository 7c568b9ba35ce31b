#!/usr/bin/env python3
"""Fetch an offline-distributable MNIST subset and write IDX files.

Pulls the `mnist` npm package (10,000 genuine MNIST digits stored as JSON,
one file per class), recovers the original u8 pixel grid, makes a
deterministic stratified train/test split, and writes the four standard
IDX files (big-endian magic 0x803/0x801) under the output directory:

    train-images-idx3-ubyte  train-labels-idx1-ubyte
    t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte

Usage:  python3 tools/fetch_mnist.py [--out data/mnist] [--test-fraction 0.2]
"""

import argparse
import json
import os
import random
import struct
import subprocess
import sys
import tempfile


def load_digits(pkg_dir):
    per_class = []
    for c in range(10):
        path = os.path.join(pkg_dir, "src", "digits", f"{c}.json")
        with open(path) as f:
            flat = json.load(f)["data"]
        n = len(flat) // 784
        imgs = []
        for i in range(n):
            px = flat[i * 784:(i + 1) * 784]
            imgs.append(bytes(min(255, max(0, round(v * 255))) for v in px))
        per_class.append(imgs)
    return per_class


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(img)


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=20240901)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "install", "mnist", "--no-audit", "--no-fund",
                        "--prefix", tmp], check=True)
        per_class = load_digits(os.path.join(tmp, "node_modules", "mnist"))

    rng = random.Random(args.seed)
    train, test = [], []
    for c, imgs in enumerate(per_class):
        idx = list(range(len(imgs)))
        rng.shuffle(idx)
        n_test = int(round(len(imgs) * args.test_fraction))
        for i in idx[:n_test]:
            test.append((imgs[i], c))
        for i in idx[n_test:]:
            train.append((imgs[i], c))
    rng.shuffle(train)
    rng.shuffle(test)

    os.makedirs(args.out, exist_ok=True)
    write_idx_images(os.path.join(args.out, "train-images-idx3-ubyte"),
                     [x for x, _ in train])
    write_idx_labels(os.path.join(args.out, "train-labels-idx1-ubyte"),
                     [y for _, y in train])
    write_idx_images(os.path.join(args.out, "t10k-images-idx3-ubyte"),
                     [x for x, _ in test])
    write_idx_labels(os.path.join(args.out, "t10k-labels-idx1-ubyte"),
                     [y for _, y in test])
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")


if __name__ == "__main__":
    sys.exit(main())
