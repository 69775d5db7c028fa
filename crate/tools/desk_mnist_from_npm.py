"""Rebuild data/mnist-desk/ from the `mnist` npm package (v1.1.0).

That package ships 10,000 genuine MNIST digits as normalized floats in
src/digits/<d>.json. This script quantizes them back to u8, shuffles them
with a fixed seed, and writes an 8,000 / 2,000 train/test split as gzipped
IDX files.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 tools/desk_mnist_from_npm.py package/src/digits data/mnist-desk
"""

import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_N = 8000


def write_gz(path, payload):
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as f:
            f.write(payload)


def images_bytes(rows):
    out = bytearray(struct.pack(">BBBBIII", 0, 0, 8, 3, len(rows), 28, 28))
    for r in rows:
        out.extend(r)
    return bytes(out)


def labels_bytes(tags):
    return struct.pack(">BBBBI", 0, 0, 8, 1, len(tags)) + bytes(tags)


def main(src, dest):
    src, dest = Path(src), Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(0, len(data), 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in data[i : i + 784])
            samples.append((px, digit))
    assert len(samples) == 10000, len(samples)
    random.Random(20191105).shuffle(samples)
    splits = {"train": samples[:TRAIN_N], "t10k": samples[TRAIN_N:]}
    for name, part in splits.items():
        write_gz(dest / f"{name}-images-idx3-ubyte.gz", images_bytes([p for p, _ in part]))
        write_gz(dest / f"{name}-labels-idx1-ubyte.gz", labels_bytes([t for _, t in part]))
        print(name, len(part))


if __name__ == "__main__":
    main(*sys.argv[1:3])
