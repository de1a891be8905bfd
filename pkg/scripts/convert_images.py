#!/usr/bin/env python3
"""Convert a folder-per-class image tree into a tensor-format dataset with manifests.

    src/<class name>/<image>.{jpg,png,...}  ->  dst/images/*.tcnds, dst/<split>.json

Images are resized to a square of ``--size`` pixels. Needs Pillow, which is
not a dependency of the package itself.
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from rescnds.data import DatasetManifest, load_manifest, write_manifest
from rescnds.tensor import save_tensor


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--split", default="train")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--mean-from", help="manifest whose channel means this split should reuse")
    a = p.parse_args()

    src, dst = Path(a.src), Path(a.dst)
    classes = sorted(d.name for d in src.iterdir() if d.is_dir())
    (dst / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for label, cls in enumerate(classes):
        for f in sorted((src / cls).iterdir()):
            try:
                img = Image.open(f).convert("RGB").resize((a.size, a.size), Image.BILINEAR)
            except OSError:
                print(f"skipping {f}: not an image")
                continue
            arr = np.asarray(img, dtype=np.float64).transpose(2, 0, 1)
            rel = f"images/{a.split}_{len(records):07d}.tcnds"
            save_tensor(dst / rel, arr)
            records.append((rel, label))
    m = DatasetManifest(dst, a.split, records, classes, a.size, a.size)
    if a.mean_from:
        m.mean = load_manifest(a.mean_from).mean
    write_manifest(m, dst / f"{a.split}.json")
    m = load_manifest(dst / f"{a.split}.json")  # computes and stores means if still missing
    print(f"{len(records)} images, {len(classes)} classes, mean {np.round(m.mean, 2).tolist()}")


if __name__ == "__main__":
    main()
