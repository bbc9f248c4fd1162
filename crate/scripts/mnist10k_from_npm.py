#!/usr/bin/env python3
"""Convert the 10,000 MNIST digits bundled with the `mnist` npm package into
gzipped IDX files (the same container as the official MNIST distribution).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist10k_from_npm.py package/src/digits data/mnist10k

Rows are shuffled with a fixed seed so that any contiguous tail is a
class-balanced hold-out set.
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src: Path, dst: Path) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        arr = np.asarray(flat, dtype=np.float64).reshape(-1, 784)
        images.append(arr)
        labels.append(np.full(arr.shape[0], digit, dtype=np.uint8))
    x = np.concatenate(images)
    y = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(x.shape[0])
    x = np.clip(np.rint(x[order] * 255.0), 0, 255).astype(np.uint8)
    y = y[order]

    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, x.shape[0], 28, 28))
        f.write(x.tobytes())
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, y.shape[0]))
        f.write(y.tobytes())
    print(f"wrote {x.shape[0]} images to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
