#!/usr/bin/env python3
"""Build desk-scale MNIST IDX files from the `mnist` npm package.

The package ships 10,000 MNIST digits as JSON arrays of pixel intensities in
[0, 1] (three decimals). Digits are split per class by alternating index into
a train half and a test half, then written as IDX files:

    data/mnist/train-images-idx3-ubyte   data/mnist/train-labels-idx1-ubyte
    data/mnist/test-images-idx3-ubyte    data/mnist/test-labels-idx1-ubyte

Usage: scripts/fetch_mnist.py [--out data/mnist] [--package-dir DIR]
"""

import argparse
import json
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "mnist@1.1.0"


def unpack(workdir: Path) -> Path:
    out = subprocess.run(
        ["npm", "pack", PACKAGE, "--silent"], cwd=workdir, check=True, capture_output=True, text=True
    )
    tarball = workdir / out.stdout.strip().splitlines()[-1]
    with tarfile.open(tarball) as tar:
        tar.extractall(workdir, filter="data")
    return workdir / "package"


def load_digits(package_dir: Path) -> dict[int, list[list[int]]]:
    digits = {}
    for label in range(10):
        flat = json.loads((package_dir / "src" / "digits" / f"{label}.json").read_text())["data"]
        if len(flat) % 784:
            raise SystemExit(f"digit {label}: {len(flat)} values is not a multiple of 784")
        pixels = [round(v * 255) for v in flat]
        digits[label] = [pixels[i : i + 784] for i in range(0, len(pixels), 784)]
    return digits


def write_idx(out: Path, split: str, samples: list[tuple[int, list[int]]]) -> None:
    with open(out / f"{split}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for _, img in samples:
            f.write(bytes(img))
    with open(out / f"{split}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for label, _ in samples))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data" / "mnist")
    ap.add_argument("--package-dir", type=Path, help="already unpacked npm package")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        package_dir = args.package_dir or unpack(Path(tmp))
        digits = load_digits(package_dir)

    halves = {"train": [], "test": []}
    longest = max(len(v) for v in digits.values())
    for i in range(longest):
        for label in range(10):
            if i < len(digits[label]):
                halves["train" if i % 2 == 0 else "test"].append((label, digits[label][i]))

    args.out.mkdir(parents=True, exist_ok=True)
    for split, samples in halves.items():
        write_idx(args.out, split, samples)
        counts = [sum(1 for label, _ in samples if label == c) for c in range(10)]
        print(f"{split}: {len(samples)} images, per class {counts}")


if __name__ == "__main__":
    main()
