"""Composite-image dataset: four dictionary tiles per image, label = sum of tile labels.

With a dictionary of ``n`` labelled images every ordered 4-tuple of entries
is composed into a 2x2 mosaic, giving ``n**4`` samples with labels in
``[4, 4n]``.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import shutil
import tempfile
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import make_rng

DEFAULT_SIZE = 56  # per quadrant
MIN_PIXEL_DIFF = 0.10
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff")
MANIFEST_COLUMNS = ("filename", "q1", "q2", "q3", "q4", "label", "split")


@dataclass(frozen=True)
class DictionaryEntry:
    label: int
    image: np.ndarray  # (H, W, 3) uint8


@dataclass
class CompositeDataset:
    out_dir: Path
    n: int
    n_samples: int
    n_train: int
    label_histogram: dict[int, int]


def pixel_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of pixels differing in at least one channel."""
    return float(np.any(a != b, axis=-1).mean())


def _glyph(label: int, n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    # stripe angle spreads evenly over [0, pi); frequency cycles through 2..5
    theta = math.pi * (label - 1) / n + rng.uniform(-0.1, 0.1) * math.pi / n
    freq = 2 + (label - 1) % 4
    phase = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size
    wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    fg, bg = rng.integers(0, 256, size=(2, 3), dtype=np.uint8)
    return np.where((wave > 0)[..., None], fg, bg).astype(np.uint8)


def generate_dictionary(n: int, image_size: int = DEFAULT_SIZE, seed: int = 0, max_attempts: int = 100) -> list[DictionaryEntry]:
    """``n`` striped glyphs, labels ``1..n``, pairwise differing in >= 10% of pixels."""
    if n < 2:
        raise ValueError("dictionary needs n >= 2")
    if image_size < 2:
        raise ValueError("image_size must be >= 2")
    images: list[np.ndarray] = []
    for label in range(1, n + 1):
        for attempt in range(max_attempts):
            img = _glyph(label, n, image_size, make_rng(seed, "images", label, attempt))
            if all(pixel_difference(img, other) >= MIN_PIXEL_DIFF for other in images):
                break
        else:
            raise RuntimeError(f"could not draw a distinct glyph for label {label}")
        images.append(img)
    return [DictionaryEntry(label, img) for label, img in enumerate(images, start=1)]


def load_dictionary(directory: str | Path, n: int) -> list[DictionaryEntry]:
    """Load ``n`` images (sorted by file name) as labels ``1..n``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    files = sorted(f for f in directory.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
    if len(files) != n:
        raise ValueError(f"expected {n} images in {directory}, found {len(files)}")
    entries = []
    for label, f in enumerate(files, start=1):
        with Image.open(f) as im:
            entries.append(DictionaryEntry(label, np.asarray(im.convert("RGB"), dtype=np.uint8)))
    shapes = {e.image.shape for e in entries}
    if len(shapes) != 1:
        raise ValueError(f"dictionary images differ in size: {sorted(shapes)}")
    return entries


def _check_dictionary(dictionary: list[DictionaryEntry]) -> None:
    if len(dictionary) < 2:
        raise ValueError("dictionary needs at least 2 entries")
    if [e.label for e in dictionary] != list(range(1, len(dictionary) + 1)):
        raise ValueError("dictionary labels must be exactly 1..n in order")
    if len({e.image.shape for e in dictionary}) != 1:
        raise ValueError("dictionary images must share a shape")


def compose(dictionary: list[DictionaryEntry], labels: tuple[int, int, int, int]) -> np.ndarray:
    """Tiles in order top-left, top-right, bottom-left, bottom-right."""
    tl, tr, bl, br = (dictionary[q - 1].image for q in labels)
    return np.concatenate([np.concatenate([tl, tr], axis=1), np.concatenate([bl, br], axis=1)], axis=0)


def quadrants(image: np.ndarray) -> tuple[np.ndarray, ...]:
    h, w = image.shape[0] // 2, image.shape[1] // 2
    return image[:h, :w], image[:h, w:], image[h:, :w], image[h:, w:]


def sample_filename(index: int) -> str:
    return f"{index:06d}.png"


def generate_dataset(
    dictionary: list[DictionaryEntry],
    out_dir: str | Path,
    split_frac: float = 0.25,
    seed: int = 0,
    raw_sidecar: bool = False,
) -> CompositeDataset:
    """Write ``images/*.png``, ``manifest.csv`` and ``meta.json`` into ``out_dir``.

    Output is staged in a temporary sibling directory and moved into place
    only when complete, so a failure leaves nothing behind.
    """
    _check_dictionary(dictionary)
    if not 0.0 < split_frac < 1.0:
        raise ValueError("split_frac must be in (0, 1)")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise FileExistsError(f"{out_dir} exists and is not empty")
    n = len(dictionary)
    tuples = list(itertools.product(range(1, n + 1), repeat=4))
    n_train = math.floor(split_frac * len(tuples))
    is_train = np.zeros(len(tuples), dtype=bool)
    is_train[make_rng(seed, "images", 0xC0FFEE).choice(len(tuples), size=n_train, replace=False)] = True

    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        (stage / "images").mkdir()
        with (stage / "manifest.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_COLUMNS)
            for idx, q in enumerate(tuples):
                img = compose(dictionary, q)
                name = sample_filename(idx)
                Image.fromarray(img).save(stage / "images" / name, format="PNG", compress_level=6)
                if raw_sidecar:
                    (stage / "images" / (name[:-4] + ".rgb")).write_bytes(img.tobytes())
                writer.writerow([name, *q, sum(q), "train" if is_train[idx] else "test"])
        h, w = dictionary[0].image.shape[:2]
        meta = {
            "n": n,
            "seed": seed,
            "split_frac": split_frac,
            "n_samples": len(tuples),
            "n_train": n_train,
            "quadrant_size": [h, w],
            "image_size": [2 * h, 2 * w],
            "raw_sidecar": raw_sidecar,
        }
        (stage / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        if out_dir.exists():
            out_dir.rmdir()
        stage.rename(out_dir)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    hist = Counter(sum(q) for q in tuples)
    return CompositeDataset(out_dir, n, len(tuples), n_train, dict(sorted(hist.items())))


def read_manifest(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            for key in ("q1", "q2", "q3", "q4", "label"):
                row[key] = int(row[key])
            rows.append(row)
    return rows


def load_sample(out_dir: str | Path, filename: str) -> np.ndarray:
    with Image.open(Path(out_dir) / "images" / filename) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
