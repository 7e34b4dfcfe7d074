"""Dataset ingestion: crop, scale, and split local grayscale images."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from eqsense.io import FormatError, IngestionError, read_pgm, to_unit

__all__ = [
    "ImageRecord",
    "Dataset",
    "center_crop",
    "ingest",
    "SYNTHETIC_KINDS",
    "synthesize",
    "generate_synthetic",
]

log = logging.getLogger(__name__)


@dataclass
class ImageRecord:
    image_id: str
    image: np.ndarray  # n-by-n float64 in [0, 1]


@dataclass
class Dataset:
    split: str
    records: List[ImageRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.records], axis=0)


def center_crop(img: np.ndarray, n: int) -> np.ndarray:
    """Central n-by-n crop, left-biased on odd margins."""
    h, w = img.shape
    if h < n or w < n:
        raise ValueError(f"image {h}x{w} smaller than crop size {n}")
    top = (h - n) // 2
    left = (w - n) // 2
    return img[top : top + n, left : left + n]


def ingest(
    dir_path,
    n: int,
    split_fractions: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
) -> Dict[str, Dataset]:
    """Load every readable PGM under a directory into train/val/test splits.

    Images smaller than n-by-n are rejected with a warning; unreadable
    files are skipped with a warning. Counts come from flooring the
    train and val fractions, with the remainder going to test. The
    shuffle is deterministic in the seed.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise IngestionError(f"{dir_path}: not a directory")
    paths = sorted(p for p in root.iterdir() if p.is_file())
    if not paths:
        raise IngestionError(f"{dir_path}: no files to ingest")
    records = []
    for p in paths:
        try:
            raw = read_pgm(p)
        except (FormatError, OSError) as e:
            log.warning("skipping %s: %s", p.name, e)
            continue
        if raw.shape[0] < n or raw.shape[1] < n:
            log.warning("rejecting %s: %dx%d is smaller than %d", p.name, *raw.shape, n)
            continue
        records.append(ImageRecord(p.name, to_unit(center_crop(raw, n))))
    if not records:
        raise IngestionError(f"{dir_path}: no usable {n}x{n} images")

    f_train, f_val = split_fractions[0], split_fractions[1]
    total = len(records)
    n_train = int(np.floor(f_train * total))
    n_val = int(np.floor(f_val * total))
    order = np.random.default_rng(seed).permutation(total)
    shuffled = [records[i] for i in order]
    return {
        "train": Dataset("train", shuffled[:n_train]),
        "val": Dataset("val", shuffled[n_train : n_train + n_val]),
        "test": Dataset("test", shuffled[n_train + n_val :]),
    }


# ---------------------------------------------------------------------------
# synthetic images for tests and demos
# ---------------------------------------------------------------------------

SYNTHETIC_KINDS = ("sparse-spikes", "piecewise", "gaussian-blobs")
SPIKE_COUNT = 5


def synthesize(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic image in [0, 1]: isolated spikes, piecewise-constant
    rectangles, or smooth Gaussian bumps."""
    if kind == "sparse-spikes":
        img = np.zeros((n, n))
        flat = rng.choice(n * n, size=SPIKE_COUNT, replace=False)
        img.reshape(-1)[flat] = rng.uniform(0.5, 1.0, size=SPIKE_COUNT)
        return img
    if kind == "piecewise":
        img = np.full((n, n), float(rng.uniform(0.2, 0.8)))
        for _ in range(6):
            h = int(rng.integers(n // 8, n // 2))
            w = int(rng.integers(n // 8, n // 2))
            top = int(rng.integers(0, n - h))
            left = int(rng.integers(0, n - w))
            img[top : top + h, left : left + w] = rng.uniform(0.0, 1.0)
        return img
    if kind == "gaussian-blobs":
        yy, xx = np.mgrid[0:n, 0:n]
        img = np.zeros((n, n))
        for _ in range(int(rng.integers(4, 9))):
            cy, cx = rng.uniform(0, n, size=2)
            width = rng.uniform(n / 16, n / 4)
            amp = rng.uniform(0.3, 1.0)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        span = img.max() - img.min()
        return (img - img.min()) / span if span > 0 else img
    raise ValueError(f"unknown synthetic kind {kind!r}")


def generate_synthetic(out_dir, kind: str, n: int, count: int, seed: int) -> List[Path]:
    """Write `count` deterministic PGM images; same seed, same bytes."""
    from eqsense.io import from_unit, write_pgm

    if n < 16:
        raise ValueError("synthetic images must be at least 16x16")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        img = synthesize(kind, n, rng)
        p = out / f"{kind}_{i:04d}.pgm"
        write_pgm(p, from_unit(img))
        paths.append(p)
    return paths
