"""Dataset manifests, mean-pixel preprocessing, crop/flip augmentation and 10-crop.

A dataset directory holds one JSON manifest per split (``train.json``,
``test.json``, optionally ``val.json``) plus the images, each stored as a
[3, H, W] tensor in the binary tensor format::

    {"split": "train", "classes": [...], "height": 40, "width": 40,
     "mean": [m_r, m_g, m_b], "records": [{"file": "images/0.tcnds", "label": 0}]}

Paths in ``records`` are relative to the manifest's directory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CropError, DecodeError, ManifestError
from .tensor import DTYPE, load_tensor, save_tensor

FULL_SCALE = dict(stored=256, crop=227)
DESK_SCALE = dict(stored=40, crop=32)


@dataclass
class DatasetManifest:
    root: Path
    split: str
    records: list  # [(relative file, label)]
    classes: list
    height: int
    width: int
    mean: Optional[np.ndarray] = None
    path: Optional[Path] = field(default=None, repr=False)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.records], dtype=np.int64)

    def to_dict(self) -> dict:
        d = {"split": self.split, "classes": list(self.classes),
             "height": self.height, "width": self.width}
        if self.mean is not None:
            d["mean"] = [float(m) for m in self.mean]
        d["records"] = [{"file": f, "label": int(lab)} for f, lab in self.records]
        return d


def write_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    path.write_text(json.dumps(m.to_dict(), indent=1) + "\n")
    m.path = path


def load_manifest(path, mean=None, write_back: bool = True) -> DatasetManifest:
    """Parse and validate a manifest.

    Channel means come from the file if present, else from ``mean`` (e.g. the
    train split's), else they are computed over this split and written back.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} not found")
    d = json.loads(path.read_text())
    classes = list(d.get("classes", []))
    if len(classes) < 2:
        raise ManifestError(f"{path}: need at least 2 classes")
    records = []
    for i, r in enumerate(d.get("records", [])):
        f, lab = r["file"], r["label"]
        if not isinstance(lab, int) or not 0 <= lab < len(classes):
            raise ManifestError(f"{path}: record {i} ({f}) has label {lab} outside [0, {len(classes)})")
        if not (path.parent / f).is_file():
            raise ManifestError(f"{path}: record {i} refers to missing file {f}")
        records.append((f, lab))
    m = DatasetManifest(path.parent, d.get("split", path.stem), records, classes,
                        int(d["height"]), int(d["width"]), path=path)
    if "mean" in d:
        m.mean = np.asarray(d["mean"], dtype=DTYPE)
    elif mean is not None:
        m.mean = np.asarray(mean, dtype=DTYPE)
    else:
        m.mean = compute_means(m)
        if write_back:
            write_manifest(m, path)
    if m.mean.shape != (3,):
        raise ManifestError(f"{path}: mean must have 3 entries")
    return m


def load_image(m: DatasetManifest, index: int) -> np.ndarray:
    f, _ = m.records[index]
    img = load_tensor(m.root / f)
    if img.shape != (3, m.height, m.width):
        raise DecodeError(f"{f}: shape {img.shape}, manifest declares (3, {m.height}, {m.width})")
    return img


def compute_means(m: DatasetManifest) -> np.ndarray:
    total = np.zeros(3)
    for i in range(len(m.records)):
        total += load_image(m, i).mean(axis=(1, 2))
    return total / max(1, len(m.records))


def preprocess(image: np.ndarray, manifest_or_mean) -> np.ndarray:
    """Subtract the per-channel mean pixel. Not idempotent."""
    image = np.asarray(image, dtype=DTYPE)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DecodeError(f"expected a [3, H, W] image, got {image.shape}")
    if isinstance(manifest_or_mean, DatasetManifest):
        m = manifest_or_mean
        if image.shape[1:] != (m.height, m.width):
            raise DecodeError(f"image geometry {image.shape[1:]} does not match the manifest")
        mean = m.mean
    else:
        mean = manifest_or_mean
    return image - np.asarray(mean, dtype=DTYPE)[:, None, None]


def load_split(m: DatasetManifest):
    """All images of a split, preprocessed, as ([n, 3, H, W], labels)."""
    x = np.stack([preprocess(load_image(m, i), m) for i in range(len(m.records))])
    return x, m.labels()


# -- crops ------------------------------------------------------------------

def _check_crop(t: np.ndarray, c: int) -> None:
    if c < 1 or c > t.shape[-2] or c > t.shape[-1]:
        raise CropError(f"crop {c} does not fit a {t.shape[-2]}x{t.shape[-1]} image")


def flip(t: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(t[..., ::-1])


def crop(t: np.ndarray, c: int, row: int, col: int) -> np.ndarray:
    _check_crop(t, c)
    if not (0 <= row <= t.shape[-2] - c and 0 <= col <= t.shape[-1] - c):
        raise CropError(f"crop origin ({row}, {col}) out of bounds")
    return np.ascontiguousarray(t[..., row:row + c, col:col + c])


def center_crop(t: np.ndarray, c: int) -> np.ndarray:
    _check_crop(t, c)
    return crop(t, c, (t.shape[-2] - c) // 2, (t.shape[-1] - c) // 2)


def augment_train(t: np.ndarray, c: int, seed) -> np.ndarray:
    """Random in-bounds c x c crop, mirrored with probability 1/2.

    ``seed`` may be a Generator, in which case draws advance its stream.
    """
    _check_crop(t, c)
    rng = np.random.default_rng(seed)
    row = int(rng.integers(0, t.shape[-2] - c + 1))
    col = int(rng.integers(0, t.shape[-1] - c + 1))
    out = crop(t, c, row, col)
    return flip(out) if rng.random() < 0.5 else out


def ten_crop(t: np.ndarray, c: int) -> list:
    """Corners TL, TR, BL, BR, centre, then the mirror of each in the same order."""
    _check_crop(t, c)
    h, w = t.shape[-2:]
    origins = [(0, 0), (0, w - c), (h - c, 0), (h - c, w - c), ((h - c) // 2, (w - c) // 2)]
    crops = [crop(t, c, r, s) for r, s in origins]
    return crops + [flip(x) for x in crops]


# -- synthetic corpus -------------------------------------------------------

SYNTHETIC_CLASSES = ["horizontal", "vertical", "diagonal"]


def synthetic_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """A noisy oriented grating in 0..255; the class is the stripe orientation."""
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    period = rng.uniform(5.0, 9.0)
    phase = rng.uniform(0, 2 * np.pi)
    coord = (yy, xx, (xx + yy) / np.sqrt(2))[label]
    wave = np.sin(2 * np.pi * coord / period + phase)
    tint = rng.uniform(0.5, 1.0, size=3)
    base = rng.uniform(90, 160, size=3)
    img = base[:, None, None] + 60.0 * tint[:, None, None] * wave[None]
    img += rng.normal(0, 12.0, size=img.shape)
    return np.clip(img, 0, 255)


def make_synthetic_dataset(root, n_train: int = 600, n_test: int = 300, size: int = 40,
                           seed: int = 0) -> Path:
    """Write a balanced 3-class grating dataset with train/test manifests."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split, n in (("train", n_train), ("test", n_test)):
        records = []
        for i in range(n):
            label = i % len(SYNTHETIC_CLASSES)
            f = f"images/{split}_{i:05d}.tcnds"
            save_tensor(root / f, synthetic_image(label, size, rng))
            records.append((f, label))
        m = DatasetManifest(root, split, records, list(SYNTHETIC_CLASSES), size, size)
        write_manifest(m, root / f"{split}.json")
    train = load_manifest(root / "train.json")
    test = load_manifest(root / "test.json", write_back=False, mean=train.mean)
    write_manifest(test, root / "test.json")
    return root
