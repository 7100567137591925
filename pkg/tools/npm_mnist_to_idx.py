"""Convert the digits bundled in the npm ``mnist`` package to gzipped IDX files.

Usage: python3 tools/npm_mnist_to_idx.py <package-dir> <out-dir>

The package stores 784 pixel values per image rounded to three decimals of
``pixel / 255``; rounding ``value * 255`` recovers the original bytes.
"""

import gzip
import json
import os
import sys

import numpy as np

from bnnc.datasets import write_idx_images, write_idx_labels


def main(pkg_dir: str, out_dir: str) -> None:
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(pkg_dir, "src", "digits", f"{digit}.json")) as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
        imgs = np.round(flat.reshape(-1, 28, 28) * 255).astype(np.uint8)
        images.append(imgs)
        labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    os.makedirs(out_dir, exist_ok=True)
    raw_img = os.path.join(out_dir, "images-idx3-ubyte")
    raw_lbl = os.path.join(out_dir, "labels-idx1-ubyte")
    write_idx_images(raw_img, np.concatenate(images))
    write_idx_labels(raw_lbl, np.concatenate(labels))
    for path in (raw_img, raw_lbl):
        with open(path, "rb") as src, gzip.GzipFile(path + ".gz", "wb", mtime=0) as dst:
            dst.write(src.read())
        os.remove(path)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
