#!/usr/bin/env python3
"""Build MNIST IDX files from the 10,000-digit sample bundled in the npm `mnist` package.

Usage: fetch_mnist_subset.py OUT_DIR [PACKAGE_DIR]

Without PACKAGE_DIR the package is fetched with `npm pack mnist@1.1.0`.
Digits are interleaved by class (0,1,...,9,0,1,...) so any prefix is balanced.
The JSON stores pixel/255 rounded to three decimals, so round(v*255) recovers
the original bytes.
"""
import json
import os
import struct
import subprocess
import sys
import tarfile
import tempfile


def main():
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    out_dir = sys.argv[1]
    os.makedirs(out_dir, exist_ok=True)
    if len(sys.argv) > 2:
        pkg = sys.argv[2]
    else:
        tmp = tempfile.mkdtemp()
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
            tar.extractall(tmp)
        pkg = os.path.join(tmp, "package")

    per_class = []
    for d in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{d}.json")) as fh:
            flat = json.load(fh)["data"]
        assert len(flat) % 784 == 0
        per_class.append([flat[i:i + 784] for i in range(0, len(flat), 784)])

    images, labels = [], []
    longest = max(len(c) for c in per_class)
    for i in range(longest):
        for d in range(10):
            if i < len(per_class[d]):
                images.append(bytes(min(255, max(0, round(v * 255))) for v in per_class[d][i]))
                labels.append(d)

    n = len(labels)
    with open(os.path.join(out_dir, "train-images-idx3-ubyte"), "wb") as fh:
        fh.write(struct.pack(">IIII", 2051, n, 28, 28))
        for img in images:
            fh.write(img)
    with open(os.path.join(out_dir, "train-labels-idx1-ubyte"), "wb") as fh:
        fh.write(struct.pack(">II", 2049, n))
        fh.write(bytes(labels))
    print(f"wrote {n} images to {out_dir}")


if __name__ == "__main__":
    main()
