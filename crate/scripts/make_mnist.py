#!/usr/bin/env python3
"""Build gzipped IDX train/test files from the digit JSON files of the npm
`mnist` package (10,000 handwritten digits, 784 pixels each in [0, 1]).

usage: make_mnist.py <package/src/digits> <out_dir> [--test 2000] [--seed 0]
"""
import argparse
import gzip
import json
import random
import struct
from pathlib import Path


def load_digits(src):
    per_class = []
    for d in range(10):
        flat = json.loads((Path(src) / f"{d}.json").read_text())["data"]
        if len(flat) % 784:
            raise SystemExit(f"{d}.json: length {len(flat)} is not a multiple of 784")
        imgs = [bytes(round(v * 255) for v in flat[i:i + 784]) for i in range(0, len(flat), 784)]
        per_class.append(imgs)
    return per_class


def test_counts(sizes, n_test):
    total = sum(sizes)
    exact = [s * n_test / total for s in sizes]
    counts = [int(e) for e in exact]
    order = sorted(range(len(sizes)), key=lambda c: (-(exact[c] - counts[c]), c))
    for c in order[: n_test - sum(counts)]:
        counts[c] += 1
    return counts


def write_idx(path_stem, images, labels):
    with gzip.GzipFile(f"{path_stem}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(f"{path_stem}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("src")
    ap.add_argument("out")
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    per_class = load_digits(args.src)
    rng = random.Random(args.seed)
    counts = test_counts([len(c) for c in per_class], args.test)
    train, test = [], []
    for label, (imgs, k) in enumerate(zip(per_class, counts)):
        idx = list(range(len(imgs)))
        rng.shuffle(idx)
        test += [(imgs[i], label) for i in idx[:k]]
        train += [(imgs[i], label) for i in idx[k:]]
    rng.shuffle(train)
    rng.shuffle(test)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in (("train", train), ("t10k", test)):
        write_idx(out / name, [r[0] for r in rows], [r[1] for r in rows])
        print(f"{name}: {len(rows)} images")


if __name__ == "__main__":
    main()
