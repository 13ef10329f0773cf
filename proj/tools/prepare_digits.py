#!/usr/bin/env python3
"""Convert the digit corpus shipped with the `mnist` npm package into IDX files.

The npm package bundles ~10k real 28x28 MNIST digits as normalized JSON arrays.
This script writes them as gzipped IDX (magic 0x803 / 0x801), shuffled with a
fixed seed, so the C++ loader can treat them exactly like the original files.

    python3 tools/prepare_digits.py [--package DIR] [--out data/]

Without --package the tarball is fetched with `npm pack mnist`.
"""
import argparse
import gzip
import json
import pathlib
import random
import struct
import subprocess
import tarfile
import tempfile


def fetch_package(workdir: pathlib.Path) -> pathlib.Path:
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    tarball = next(workdir.glob("mnist-*.tgz"))
    with tarfile.open(tarball) as tf:
        tf.extractall(workdir)
    return workdir / "package"


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--package", type=pathlib.Path)
    ap.add_argument("--out", type=pathlib.Path,
                    default=pathlib.Path(__file__).resolve().parent.parent / "data")
    ap.add_argument("--seed", type=int, default=20240607)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        pkg = args.package or fetch_package(pathlib.Path(tmp))
        samples = []
        for label in range(10):
            raw = json.loads((pkg / "src" / "digits" / f"{label}.json").read_text())["data"]
            n = len(raw) // 784
            for i in range(n):
                px = bytes(min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784])
                samples.append((px, label))

    random.Random(args.seed).shuffle(samples)
    args.out.mkdir(parents=True, exist_ok=True)
    n = len(samples)
    with gzip.GzipFile(args.out / "digits-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for px, _ in samples:
            f.write(px)
    with gzip.GzipFile(args.out / "digits-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {n} samples to {args.out}")


if __name__ == "__main__":
    main()
