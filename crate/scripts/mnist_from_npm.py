#!/usr/bin/env python3
"""Rebuild data/mnist/*.gz from the digit subset bundled in the `mnist` npm package.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The npm package ships ~10k MNIST digits as [0,1] floats rounded to three
decimals; bytes are recovered with round(v * 255). Samples are interleaved
with a fixed seed and split 8000/2000 into train/test IDX files.
"""
import gzip
import json
import os
import random
import struct
import sys


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main(src, dst):
    samples = []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            raw = json.load(f)["data"]
        for k in range(len(raw) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in raw[k * 784:(k + 1) * 784])
            samples.append((digit, px))
    random.Random(20240613).shuffle(samples)
    n_train = 8000
    os.makedirs(dst, exist_ok=True)
    for name, part in (("train", samples[:n_train]), ("t10k", samples[n_train:])):
        write_idx(os.path.join(dst, f"{name}-images-idx3-ubyte.gz"), 0x803,
                  (len(part), 28, 28), b"".join(p for _, p in part))
        write_idx(os.path.join(dst, f"{name}-labels-idx1-ubyte.gz"), 0x801,
                  (len(part),), bytes(l for l, _ in part))
        print(name, len(part))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
