"""Write the scikit-learn 8x8 digits as an IDX dataset directory.

Pixel intensities 0..16 are rescaled to 0..255. The split is a seeded
permutation: the first --test images form the test set.
"""
import argparse
import pathlib
import struct

import numpy as np
from sklearn.datasets import load_digits


def write_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=pathlib.Path)
    ap.add_argument("--test", type=int, default=500)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    digits = load_digits()
    images = np.rint(digits.images * (255.0 / 16.0)).clip(0, 255)
    labels = digits.target
    order = np.random.default_rng(args.seed).permutation(len(labels))
    test, train = order[: args.test], order[args.test :]

    args.out.mkdir(parents=True, exist_ok=True)
    write_images(args.out / "train-images-idx3-ubyte", images[train])
    write_labels(args.out / "train-labels-idx1-ubyte", labels[train])
    write_images(args.out / "t10k-images-idx3-ubyte", images[test])
    write_labels(args.out / "t10k-labels-idx1-ubyte", labels[test])
    print(f"{len(train)} train / {len(test)} test images in {args.out}")


if __name__ == "__main__":
    main()
