#!/usr/bin/env python3
"""Rebuild the standard CIFAR-10 binary batches and Fashion-MNIST IDX files.

The canonical download hosts are not always reachable from build sandboxes, so
this script pulls the image payloads from npm registry mirrors and re-encodes
them into the archive layouts the C++ loaders read:

  <root>/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
  <root>/fashion-mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte

Usage: fetch_datasets.py [--root DIR] [--only cifar10|fashion-mnist]
"""
import argparse
import io
import json
import os
import struct
import sys
import tarfile
import urllib.request

import numpy as np
from PIL import Image

CIFAR_TGZ = "https://registry.npmjs.org/tfjs-cifar10/-/tfjs-cifar10-1.1.1.tgz"
FMNIST_TGZ = "https://registry.npmjs.org/fashion-mnist/-/fashion-mnist-1.1.0.tgz"


def fetch(url, cache):
    path = os.path.join(cache, os.path.basename(url))
    if not os.path.exists(path):
        print(f"downloading {url}", file=sys.stderr)
        with urllib.request.urlopen(url, timeout=600) as r, open(path + ".part", "wb") as f:
            while True:
                chunk = r.read(1 << 20)
                if not chunk:
                    break
                f.write(chunk)
        os.replace(path + ".part", path)
    return tarfile.open(path, "r:gz")


def build_cifar10(root, cache):
    out = os.path.join(root, "cifar-10-batches-bin")
    os.makedirs(out, exist_ok=True)
    tar = fetch(CIFAR_TGZ, cache)

    def member(name):
        return tar.extractfile("package/" + name).read()

    train_labels = json.loads(member("train_lables.json"))
    test_labels = json.loads(member("test_lables.json"))
    batches = [(f"data_batch_{i}", train_labels[(i - 1) * 10000:i * 10000]) for i in range(1, 6)]
    batches.append(("test_batch", test_labels))
    for name, labels in batches:
        # each PNG row holds one 32x32 RGB image in row-major pixel order
        rows = np.asarray(Image.open(io.BytesIO(member(name + ".png"))).convert("RGB"))
        assert rows.shape == (10000, 1024, 3), rows.shape
        planes = rows.reshape(10000, 32, 32, 3).transpose(0, 3, 1, 2).reshape(10000, 3072)
        record = np.empty((10000, 3073), dtype=np.uint8)
        record[:, 0] = np.asarray(labels, dtype=np.uint8)
        record[:, 1:] = planes
        with open(os.path.join(out, name + ".bin"), "wb") as f:
            f.write(record.tobytes())
        print(f"wrote {name}.bin", file=sys.stderr)


def write_idx(path, images, labels):
    with open(path + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with open(path + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def build_fashion_mnist(root, cache):
    out = os.path.join(root, "fashion-mnist")
    os.makedirs(out, exist_ok=True)
    tar = fetch(FMNIST_TGZ, cache)
    per_class = []
    for k in range(10):
        data = json.loads(tar.extractfile(f"package/src/clothes/{k}.json").read())["data"]
        per_class.append(np.asarray([row for row in data if len(row) == 784][:7000], dtype=np.uint8))
    # the mirror groups samples by class without the original split: the first
    # 6000 of each class become train, the rest test, interleaved round-robin
    def interleave(lo, hi):
        imgs = np.stack([c[lo:hi] for c in per_class], axis=1).reshape(-1, 784)
        labels = np.tile(np.arange(10, dtype=np.uint8), hi - lo)
        return imgs, labels

    write_idx(os.path.join(out, "train"), *interleave(0, 6000))
    write_idx(os.path.join(out, "t10k"), *interleave(6000, 7000))
    print("wrote fashion-mnist idx files", file=sys.stderr)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default=os.environ.get("MBAFL_DATA_ROOT", "data"))
    ap.add_argument("--cache", default=None)
    ap.add_argument("--only", choices=["cifar10", "fashion-mnist"])
    args = ap.parse_args()
    cache = args.cache or os.path.join(args.root, ".cache")
    os.makedirs(cache, exist_ok=True)
    if args.only in (None, "cifar10"):
        build_cifar10(args.root, cache)
    if args.only in (None, "fashion-mnist"):
        build_fashion_mnist(args.root, cache)


if __name__ == "__main__":
    main()
