#!/usr/bin/env python3
"""Convert the digit subset bundled with the npm `mnist` package into IDX files.

The npm package (https://www.npmjs.com/package/mnist) ships 10000 MNIST digits
as JSON arrays of 28x28 grey levels rounded to three decimals. Grey levels are
recovered exactly as round(v * 255). Digits are shuffled with a fixed seed and
split into a train part and a validation part written with the standard MNIST
file names, gzip-compressed.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_to_idx.py package/src/digits data/mnist
"""

import gzip
import json
import os
import random
import struct
import sys

VAL_COUNT = 2000
SEED = 20210101


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = sys.argv[1], sys.argv[2]
    samples = []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        assert len(flat) % 784 == 0
        for k in range(len(flat) // 784):
            px = [int(round(v * 255)) for v in flat[k * 784:(k + 1) * 784]]
            assert all(0 <= p <= 255 for p in px)
            samples.append((px, digit))
    random.Random(SEED).shuffle(samples)
    val, train = samples[:VAL_COUNT], samples[VAL_COUNT:]
    os.makedirs(dst, exist_ok=True)
    write_images(os.path.join(dst, "train-images-idx3-ubyte.gz"), [s[0] for s in train])
    write_labels(os.path.join(dst, "train-labels-idx1-ubyte.gz"), [s[1] for s in train])
    write_images(os.path.join(dst, "t10k-images-idx3-ubyte.gz"), [s[0] for s in val])
    write_labels(os.path.join(dst, "t10k-labels-idx1-ubyte.gz"), [s[1] for s in val])
    print(f"train={len(train)} val={len(val)} -> {dst}")


if __name__ == "__main__":
    main()
