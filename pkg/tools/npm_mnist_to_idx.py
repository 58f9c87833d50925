"""Convert the digit JSON shipped in the npm ``mnist`` package to IDX files.

The package (``npm pack mnist``) carries 10,000 MNIST digits as
``package/src/digits/<d>.json`` with 784 grey levels in [0, 1] per image.
Digits are interleaved round-robin by class; every fifth round goes to the
test split (8,004 train / 1,996 test).

    python tools/npm_mnist_to_idx.py /path/to/package data/mnist
"""

import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("package", type=Path, help="unpacked npm package directory")
    ap.add_argument("out", type=Path)
    args = ap.parse_args()

    per_digit = []
    for d in range(10):
        flat = json.loads((args.package / "src" / "digits" / f"{d}.json").read_text())["data"]
        img = np.rint(np.asarray(flat).reshape(-1, 28, 28) * 255).astype(np.uint8)
        per_digit.append(img)

    images, labels, rounds = [], [], []
    for i in range(max(len(x) for x in per_digit)):
        for d, imgs in enumerate(per_digit):
            if i < len(imgs):
                images.append(imgs[i])
                labels.append(d)
                rounds.append(i)
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.uint8)
    test = np.asarray(rounds) % 5 == 4

    args.out.mkdir(parents=True, exist_ok=True)
    for prefix, mask in (("train", ~test), ("t10k", test)):
        write_idx(args.out / f"{prefix}-images-idx3-ubyte.gz", images[mask], 0x00000803)
        write_idx(args.out / f"{prefix}-labels-idx1-ubyte.gz", labels[mask], 0x00000801)
        print(prefix, int(mask.sum()), "images")


if __name__ == "__main__":
    main()
