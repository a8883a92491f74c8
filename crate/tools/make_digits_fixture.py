#!/usr/bin/env python3
"""Export scikit-learn's bundled 8x8 handwritten digits to IDX files.

Produces the committed fixture under data/digits/ used by the integration
and acceptance tests: a stratified, seeded 80/20 train/test split of the
1797-sample UCI optical digits set. Pixel values 0..16 are rescaled to
bytes 0..255 so loaders that divide by 255 recover [0, 1] features.

Run once from the repository root:  python3 tools/make_digits_fixture.py
"""

import struct
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

OUT = Path(__file__).resolve().parent.parent / "data" / "digits"
SEED = 7
TRAIN_FRACTION = 0.8


def write_idx_images(path: Path, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    digits = load_digits()
    images = np.round(digits.images / 16.0 * 255.0).astype(np.uint8)
    labels = digits.target.astype(np.uint8)

    rng = np.random.default_rng(SEED)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        cut = int(round(len(idx) * TRAIN_FRACTION))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))

    OUT.mkdir(parents=True, exist_ok=True)
    write_idx_images(OUT / "train-images-idx3-ubyte", images[train_idx])
    write_idx_labels(OUT / "train-labels-idx1-ubyte", labels[train_idx])
    write_idx_images(OUT / "test-images-idx3-ubyte", images[test_idx])
    write_idx_labels(OUT / "test-labels-idx1-ubyte", labels[test_idx])
    print(f"train: {len(train_idx)}  test: {len(test_idx)}  -> {OUT}")


if __name__ == "__main__":
    main()
