#!/usr/bin/env python3
"""Regenerate the committed real-data test fixtures under data/.

Fixtures produced (deterministic):
  data/digits/train-images-idx3-ubyte   1200 handwritten digits, 28x28
  data/digits/train-labels-idx1-ubyte
  data/digits/test-images-idx3-ubyte     597 digits
  data/digits/test-labels-idx1-ubyte
  data/uci/diabetes.csv                  442x10 regression table, raw units,
                                         target in the last column

Source: scikit-learn's bundled copies of the UCI optical handwritten digits
set (1797 samples, 8x8, intensity 0..16) and the diabetes regression set.
The 8x8 images are bilinearly resized to 28x28 so the fixtures exercise the
same 784-feature network shapes and IDX readers as full-size digit images.
Split 1200/597 by a fixed permutation (seed 0).

Requires: scikit-learn, scipy, numpy. Run from the repo root:
    python3 scripts/make_digits_fixtures.py
"""
import struct
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits, load_diabetes

ROOT = Path(__file__).resolve().parent.parent


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
    imgs8 = digits.images  # (1797, 8, 8), values 0..16
    labels = digits.target.astype(np.uint8)

    big = np.stack([ndimage.zoom(im, 28 / 8, order=1) for im in imgs8])
    big = np.clip(np.rint(big * (255.0 / 16.0)), 0, 255).astype(np.uint8)

    rng = np.random.default_rng(0)
    perm = rng.permutation(len(big))
    tr, te = perm[:1200], perm[1200:]

    out = ROOT / "data" / "digits"
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte", big[tr])
    write_idx_labels(out / "train-labels-idx1-ubyte", labels[tr])
    write_idx_images(out / "test-images-idx3-ubyte", big[te])
    write_idx_labels(out / "test-labels-idx1-ubyte", labels[te])
    print(f"digits: train {len(tr)}, test {len(te)}, 28x28 -> {out}")

    dia = load_diabetes(scaled=False)
    ucidir = ROOT / "data" / "uci"
    ucidir.mkdir(parents=True, exist_ok=True)
    cols = list(dia.feature_names) + ["target"]
    table = np.column_stack([dia.data, dia.target])
    with open(ucidir / "diabetes.csv", "w") as f:
        f.write(",".join(cols) + "\n")
        for row in table:
            f.write(",".join(f"{v:.10g}" for v in row) + "\n")
    print(f"diabetes: {table.shape[0]} rows, {table.shape[1]} cols -> {ucidir/'diabetes.csv'}")


if __name__ == "__main__":
    main()
