"""Dataset ingestion, splitting, resizing, encoding and synthetic corpora.

Corpus layout on disk is ``<root>/<class_name>/<image files>``. Class indices
follow lexicographic order of the subdirectory names, and that order is the
one-hot column order everywhere downstream.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ArtifactIOError, ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_SIDE = 75
RESIZE_METHOD = "bilinear"
DEFAULT_RATIOS = (0.70, 0.15, 0.15)
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class DatasetIndex:
    samples: list[tuple[Path, int]]
    class_names: list[str]
    root: Path | None = None

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError(f"duplicate class names: {self.class_names}")
        k = len(self.class_names)
        for path, label in self.samples:
            if not 0 <= label < k:
                raise DataError(f"label {label} of {path} outside [0, {k})")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.samples], dtype=np.int64)

    @property
    def paths(self) -> list[Path]:
        return [path for path, _ in self.samples]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class SplitAssignment:
    train: list[int]
    val: list[int]
    test: list[int]
    ratios: tuple[float, float, float]
    seed: int

    def parts(self) -> dict[str, list[int]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def scan_dataset(root: str | Path) -> DatasetIndex:
    """Catalog a class-per-subdirectory image corpus.

    Every file is opened to check that it decodes; failures are collected and
    reported together.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")),
                        key=lambda p: p.name)
    if not class_dirs:
        raise DataError(f"no class subdirectories under {root}")

    samples: list[tuple[Path, int]] = []
    bad: list[str] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.is_file() and not p.name.startswith("."))
        if not files:
            raise DataError(f"class {class_dir.name!r} has no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError, SyntaxError):
                bad.append(str(f))
                continue
            samples.append((f, label))
    if bad:
        raise DataError("undecodable image files: " + ", ".join(bad))
    return DatasetIndex(samples, [d.name for d in class_dirs], root=root)


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise ConfigError(f"expected three split ratios, got {list(ratios)}")
    r = tuple(float(x) for x in ratios)
    if any(x <= 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be positive and sum to 1, got {r}")
    return r  # type: ignore[return-value]


def _split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    # Every count within 1 of its exact share; among those prefer all splits
    # populated, then the smallest deviation.
    targets = [r * n for r in ratios]
    options = [[c for c in range(max(0, math.floor(t) - 1), math.ceil(t) + 2) if abs(c - t) <= 1 + 1e-9]
               for t in targets]
    best = None
    for combo in itertools.product(*options):
        if sum(combo) != n:
            continue
        devs = [abs(c - t) for c, t in zip(combo, targets)]
        key = (sum(c == 0 for c in combo), max(devs), sum(devs), [-c for c in combo])
        if best is None or key < best[0]:
            best = (key, combo)
    assert best is not None
    return best[1]


def split_dataset(index: DatasetIndex, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    """Stratified train/val/test split driven only by ``seed``."""
    r = _check_ratios(ratios)
    labels = index.labels
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for k, name in enumerate(index.class_names):
        members = np.flatnonzero(labels == k)
        if len(members) < 3:
            raise DataError(f"class {name!r} has {len(members)} samples; at least 3 are needed to populate every split")
        members = rng.permutation(members)
        counts = _split_counts(len(members), r)
        if 0 in counts:
            log.warning("class %r: %d samples cannot fill every split at ratios %s", name, len(members), r)
        edges = np.cumsum((0,) + counts)
        for i in range(3):
            parts[i].extend(int(j) for j in members[edges[i]:edges[i + 1]])
    return SplitAssignment(sorted(parts[0]), sorted(parts[1]), sorted(parts[2]), r, int(seed))


def save_split(path: str | Path, index: DatasetIndex, split: SplitAssignment) -> None:
    """Persist a split as JSON with paths relative to the dataset root."""
    if index.root is None:
        raise DataError("index has no root; cannot write relative paths")
    root = index.root

    def entries(ids):
        return [[index.samples[i][0].relative_to(root).as_posix(), index.samples[i][1]] for i in ids]

    doc = {
        "seed": split.seed,
        "ratios": list(split.ratios),
        "class_names": index.class_names,
        "splits": {name: entries(ids) for name, ids in split.parts().items()},
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=1))
    except OSError as e:
        raise ArtifactIOError(f"cannot write split file {path}: {e}") from e


def load_split(path: str | Path, root: str | Path) -> tuple[DatasetIndex, SplitAssignment]:
    """Rebuild the index and split from a split JSON written by :func:`save_split`."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ArtifactIOError(f"cannot read split file {path}: {e}") from e
    root = Path(root)
    samples: list[tuple[Path, int]] = []
    ids: dict[str, list[int]] = {}
    for name in SPLIT_NAMES:
        start = len(samples)
        samples.extend((root / rel, int(label)) for rel, label in doc["splits"][name])
        ids[name] = list(range(start, len(samples)))
    index = DatasetIndex(samples, list(doc["class_names"]), root=root)
    split = SplitAssignment(ids["train"], ids["val"], ids["test"], tuple(doc["ratios"]), int(doc["seed"]))
    return index, split


def load_and_resize(path: str | Path, side: int = IMAGE_SIDE) -> np.ndarray:
    """Decode an image as RGB and resize it bilinearly to ``(side, side, 3)``.

    Values stay on the 0..255 pixel scale, as float32; resizing is done per
    channel in floating point so no intermediate rounding happens.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            channels = [ch.convert("F") for ch in im.split()]
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    if im.size != (side, side):
        channels = [ch.resize((side, side), Image.Resampling.BILINEAR) for ch in channels]
    return np.stack([np.asarray(ch, dtype=np.float32) for ch in channels], axis=-1)


def load_images(paths: Sequence[str | Path], side: int = IMAGE_SIDE, workers: int = 1) -> np.ndarray:
    """Load and resize many images. Output order follows ``paths`` regardless of ``workers``."""
    out = np.empty((len(paths), side, side, 3), dtype=np.float32)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            for i, arr in enumerate(pool.map(lambda p: load_and_resize(p, side), paths)):
                out[i] = arr
    else:
        for i, p in enumerate(paths):
            out[i] = load_and_resize(p, side)
    return out


def encode_labels(labels: Sequence[int], k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bad = labels[(labels < 0) | (labels >= k)]
    if bad.size:
        raise DataError(f"label {int(bad[0])} outside [0, {k})")
    onehot = np.zeros((labels.size, k), dtype=np.float32)
    onehot[np.arange(labels.size), labels] = 1.0
    return onehot


def normalize(batch: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Map pixel values in [0, 255] to [0, 1] by dividing by 255."""
    arr = np.asarray(batch)
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 255):
        raise DataError(f"pixel values must lie in [0, 255]; got range [{arr.min()}, {arr.max()}]")
    return (arr.astype(np.float64) / 255.0).astype(dtype)


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (n, side, side, 3) uint8
    labels: np.ndarray
    class_names: list[str]
    seed: int
    meta: dict = field(default_factory=dict)


def generate_synthetic(k: int, per_class: int, side: int = IMAGE_SIDE, seed: int = 0) -> SyntheticDataset:
    """Class ``c`` is a bright vertical bar in the ``c``-th of ``k`` column bands,
    over a dark background, plus seeded Gaussian noise.

    The bar raises the mean of its own band far above the noise level, so the
    classes are linearly separable in pixel space.
    """
    if k < 2 or per_class < 3:
        raise ConfigError(f"need k >= 2 and per_class >= 3, got k={k}, per_class={per_class}")
    if side < k:
        raise ConfigError(f"side {side} too small for {k} bar positions")
    rng = np.random.default_rng(seed)
    edges = np.linspace(0, side, k + 1).round().astype(int)
    width = len(str(k - 1))
    names = [str(c).zfill(width) for c in range(k)]

    images = np.empty((k * per_class, side, side, 3), dtype=np.uint8)
    labels = np.repeat(np.arange(k), per_class)
    for i, c in enumerate(labels):
        img = np.full((side, side, 3), 40.0)
        img[side // 8: side - side // 8, edges[c]:edges[c + 1], :] = 210.0
        img += rng.normal(0.0, 12.0, size=img.shape)
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SyntheticDataset(images, labels, names, seed, {"k": k, "per_class": per_class, "side": side})


def export_synthetic(ds: SyntheticDataset, root: str | Path) -> DatasetIndex:
    """Write a synthetic dataset as lossless PNGs in the standard corpus layout."""
    root = Path(root)
    samples = []
    try:
        for name in ds.class_names:
            (root / name).mkdir(parents=True, exist_ok=True)
        counters = [0] * len(ds.class_names)
        for img, label in zip(ds.images, ds.labels):
            name = ds.class_names[label]
            path = root / name / f"{name}_{counters[label]:05d}.png"
            counters[label] += 1
            Image.fromarray(img, mode="RGB").save(path)
            samples.append((path, int(label)))
    except OSError as e:
        raise ArtifactIOError(f"cannot export synthetic dataset to {root}: {e}") from e
    return DatasetIndex(samples, list(ds.class_names), root=root)
