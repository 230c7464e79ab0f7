#!/usr/bin/env python3
"""Convert the digit arrays bundled with the npm `mnist` package to IDX files.

The package ships src/digits/<d>.json, each {"data": [...]} holding that
digit's images as concatenated 784-value rows scaled to [0, 1]. Rows are
interleaved across classes so that any prefix is roughly class-balanced.

    python3 tools/npm_mnist_to_idx.py path/to/package/src/digits out_dir
"""

import argparse
import json
import pathlib
import struct

PIXELS = 28 * 28


def load_digit(path):
    values = json.loads(path.read_text())["data"]
    if len(values) % PIXELS:
        raise SystemExit(f"{path}: {len(values)} values is not a multiple of {PIXELS}")
    rows = []
    for start in range(0, len(values), PIXELS):
        rows.append(bytes(min(255, max(0, round(v * 255))) for v in values[start:start + PIXELS]))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits_dir", type=pathlib.Path)
    parser.add_argument("out_dir", type=pathlib.Path)
    args = parser.parse_args()

    per_class = [load_digit(args.digits_dir / f"{d}.json") for d in range(10)]
    images, labels = [], []
    for k in range(max(len(rows) for rows in per_class)):
        for digit, rows in enumerate(per_class):
            if k < len(rows):
                images.append(rows[k])
                labels.append(digit)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    with open(args.out_dir / "images.idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        f.writelines(images)
    with open(args.out_dir / "labels.idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))
    print(f"wrote {len(images)} images to {args.out_dir}")


if __name__ == "__main__":
    main()
