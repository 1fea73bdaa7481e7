"""Dataset ingestion, synthetic data, and pair/episode samplers.

Loaders emit a Dataset of float64 images in [0, 1] with shape (N, 1, H, W)
and integer class ids. All sampling is a pure function of (dataset,
parameters, seed): the same seed always yields the same batch or episode.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, SamplingError, ShapeError
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: Tensor
    labels: Tensor
    name: str = "dataset"

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(f"Dataset: images must be (N, 1, H, W), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ShapeError(
                f"Dataset: {labels.shape[0] if labels.ndim else 0} labels for {images.shape[0]} images"
            )
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise FormatError("Dataset: pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    def class_counts(self) -> dict[int, int]:
        classes, counts = np.unique(self.labels, return_counts=True)
        return {int(c): int(n) for c, n in zip(classes, counts)}


@dataclass(frozen=True)
class PairBatch:
    """Same/different image pairs: y = 0 shares a label, y = 1 does not."""

    x1: Tensor
    x2: Tensor
    y: Tensor


@dataclass(frozen=True)
class Episode:
    """N-way K-shot support set plus queries drawn from the same classes."""

    support_images: Tensor
    support_labels: Tensor
    query_images: Tensor
    query_labels: Tensor


def _open_maybe_gz(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, n, path, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated while reading {what} at offset {fh.tell() - len(data)}")
    return data


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    """Standard IDX image/label container pair (optionally gzipped)."""
    with _open_maybe_gz(images_path) as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, images_path, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: bad images magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        count, rows, cols = struct.unpack(">III", _read_exact(fh, 12, images_path, "image header"))
        raw = _read_exact(fh, count * rows * cols, images_path, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    with _open_maybe_gz(labels_path) as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: bad labels magic 0x{magic:08x} at offset 0, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        (lcount,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "label header"))
        labels = np.frombuffer(_read_exact(fh, lcount, labels_path, "label data"), dtype=np.uint8)
    if count != lcount:
        raise FormatError(f"{images_path}: {count} images but {lcount} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), name=name)


def _parse_pgm(path) -> Tensor:
    """Binary (P5) PGM with maxval 255."""
    data = Path(path).read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header at offset {start}")
        return data[start:pos]

    magic = token()
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r}, expected P5)")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable PGM header: {exc}") from exc
    if maxval != 255:
        raise FormatError(f"{path}: PGM maxval {maxval} unsupported, expected 255")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise FormatError(f"{path}: truncated PGM raster at offset {pos}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0


def resample_matrix(n_in: int, n_out: int) -> Tensor:
    """Area-average resampling weights; each row sums to 1."""
    edges_in = np.arange(n_in + 1) * (n_out / n_in)
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i, i + 1
        overlap = np.minimum(edges_in[1:], hi) - np.maximum(edges_in[:-1], lo)
        mat[i] = np.maximum(overlap, 0.0)
    return mat / mat.sum(axis=1, keepdims=True)


def area_resize(img: Tensor, h_out: int, w_out: int) -> Tensor:
    """Exact area-weighted resize (both up and down) of a 2-D image."""
    rh = resample_matrix(img.shape[0], h_out)
    rw = resample_matrix(img.shape[1], w_out)
    return rh @ img @ rw.T


def load_pgm_dir(root_path, size: int = 100, name: str = "pgm") -> Dataset:
    """Per-subject directories of P5 PGM files; class id = sorted dir index."""
    root = Path(root_path)
    if not root.is_dir():
        raise FormatError(f"{root}: not a directory")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subdirs:
        raise FormatError(f"{root}: no class subdirectories found")
    images, labels = [], []
    for class_id, sub in enumerate(subdirs):
        files = sorted(p for p in sub.iterdir() if p.is_file() and p.suffix.lower() == ".pgm")
        if not files:
            raise FormatError(f"{sub}: class directory contains no .pgm files")
        for f in files:
            img = _parse_pgm(f)
            if img.shape != (size, size):
                img = np.clip(area_resize(img, size, size), 0.0, 1.0)
            images.append(img[None, :, :])
            labels.append(class_id)
    return Dataset(np.stack(images), np.array(labels), name=name)


def load_omniglot_dir(root_path, split: str = "background", size: int | None = 28,
                      name: str = "omniglot") -> Dataset:
    """Alphabet/character/sample PNG tree, binarised at 0.5 after scaling.

    Class id is the (alphabet, character) pair densely renumbered in sorted
    order. PNG decoding (Pillow) is needed only here. `size` resizes with
    area averaging before thresholding; None keeps the native extent.
    """
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is a declared dependency
        raise FormatError("load_omniglot_dir requires Pillow for PNG decoding") from exc

    root = Path(root_path)
    split_dir = None
    for candidate in (root / split, root / f"images_{split}"):
        if candidate.is_dir():
            split_dir = candidate
            break
    if split_dir is None:
        raise FormatError(f"{root}: missing split directory {split!r} (or images_{split})")

    characters = []
    for alphabet in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        for character in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            characters.append(character)
    if not characters:
        raise FormatError(f"{split_dir}: no alphabet/character directories found")

    images, labels = [], []
    for class_id, chardir in enumerate(characters):
        files = sorted(p for p in chardir.iterdir() if p.is_file() and p.suffix.lower() == ".png")
        if not files:
            raise FormatError(f"{chardir}: character directory contains no .png samples")
        for f in files:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            if size is not None and arr.shape != (size, size):
                arr = area_resize(arr, size, size)
            images.append((arr > 0.5).astype(np.float64)[None, :, :])
            labels.append(class_id)
    return Dataset(np.stack(images), np.array(labels), name=name)


def make_synthetic(classes: int, per_class: int, h: int = 28, seed: int = 0,
                   noise_std: float = 0.05, name: str = "synthetic") -> Dataset:
    """Deterministic toy dataset: one geometric template per class plus noise.

    Even classes are bars, odd classes are discs, both at class-specific
    positions, so any two templates differ on many pixels.
    """
    if classes < 2:
        raise SamplingError(f"make_synthetic: need at least 2 classes, got {classes}")
    templates = np.zeros((classes, h, h))
    slots = (classes + 1) // 2
    for c in range(classes):
        idx = c // 2
        center = int(round((idx + 1) / (slots + 1) * (h - 1)))
        if c % 2 == 0:
            half = max(1, h // 10)
            lo, hi = max(0, center - half), min(h, center + half + 1)
            templates[c, :, lo:hi] = 1.0
        else:
            r = max(2, h // 8)
            cy, cx = center, h - 1 - center
            yy, xx = np.ogrid[:h, :h]
            templates[c, (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1.0

    rng = np.random.default_rng(seed)
    images = np.repeat(templates, per_class, axis=0)[:, None, :, :]
    if noise_std > 0:
        images = images + rng.normal(0.0, noise_std, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(images, labels, name=name)


def make_noise(n: int, h: int = 28, classes: int = 5, seed: int = 0,
               name: str = "noise") -> Dataset:
    """Label-free noise images with round-robin labels; classes carry no signal."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, size=(n, 1, h, h))
    labels = np.arange(n) % classes
    return Dataset(images, labels, name=name)


def subsample(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """First n images under a seeded shuffle; the paper-style random subset."""
    if n >= len(ds):
        return ds
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))[:n]
    return Dataset(ds.images[order], ds.labels[order], name=f"{ds.name}[{n}]")


def split_dataset(ds: Dataset, n_first: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then split into the first n and the rest."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    first, rest = order[:n_first], order[n_first:]
    return (
        Dataset(ds.images[first], ds.labels[first], name=f"{ds.name}[:{n_first}]"),
        Dataset(ds.images[rest], ds.labels[rest], name=f"{ds.name}[{n_first}:]"),
    )


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_pairs(ds: Dataset, batch: int, seed) -> PairBatch:
    """Balanced pair batch: ceil(B/2) similar then floor(B/2) dissimilar, shuffled.

    Similar pairs draw their class uniformly, then two distinct images of
    it; dissimilar pairs draw two distinct classes. An image is never
    paired with itself.
    """
    if batch < 1:
        raise SamplingError(f"sample_pairs: batch must be positive, got {batch}")
    rng = _as_rng(seed)
    labels = ds.labels
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        bad = classes[np.argmin(counts)]
        raise SamplingError(
            f"sample_pairs: class {bad} has {int(counts.min())} member(s); pair sampling needs >= 2"
        )
    by_class = {int(c): np.flatnonzero(labels == c) for c in classes}

    n_sim = (batch + 1) // 2
    n_dis = batch // 2
    if n_dis > 0 and classes.size < 2:
        raise SamplingError("sample_pairs: dissimilar pairs need at least 2 classes")
    idx1, idx2, ys = [], [], []
    for _ in range(n_sim):
        c = int(rng.choice(classes))
        a, b = rng.choice(by_class[c], size=2, replace=False)
        idx1.append(a)
        idx2.append(b)
        ys.append(0)
    for _ in range(n_dis):
        ca, cb = rng.choice(classes, size=2, replace=False)
        idx1.append(int(rng.choice(by_class[int(ca)])))
        idx2.append(int(rng.choice(by_class[int(cb)])))
        ys.append(1)
    order = rng.permutation(batch)
    idx1 = np.asarray(idx1)[order]
    idx2 = np.asarray(idx2)[order]
    ys = np.asarray(ys, dtype=np.int64)[order]
    return PairBatch(ds.images[idx1], ds.images[idx2], ys)


def sample_episode(ds: Dataset, n_way: int, k_shot: int, queries: int, seed) -> Episode:
    """N-way K-shot episode with disjoint support and query images."""
    if n_way < 2:
        raise SamplingError(f"sample_episode: n_way must be >= 2, got {n_way}")
    if k_shot < 1 or queries < 1:
        raise SamplingError("sample_episode: k_shot and queries must be positive")
    rng = _as_rng(seed)
    labels = ds.labels
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= k_shot]
    if eligible.size < n_way:
        raise SamplingError(
            f"sample_episode: need {n_way} classes with >= {k_shot} samples, "
            f"found {int(eligible.size)}"
        )
    chosen = rng.choice(eligible, size=n_way, replace=False)
    by_class = {int(c): np.flatnonzero(labels == c) for c in chosen}
    spare = np.array([by_class[int(c)].size - k_shot for c in chosen])
    if spare.sum() < queries:
        raise SamplingError(
            f"sample_episode: {queries} disjoint queries requested but the chosen "
            f"classes have only {int(spare.sum())} samples beyond their supports"
        )
    # queries round-robin over a shuffled class order, capped by what each
    # class can spare (classes with exactly K samples are support-only)
    q_per = np.zeros(n_way, dtype=np.int64)
    order = rng.permutation(n_way)
    remaining = queries
    while remaining > 0:
        for idx in order:
            if remaining > 0 and q_per[idx] < spare[idx]:
                q_per[idx] += 1
                remaining -= 1

    sup_idx, qry_idx = [], []
    for c, nq in zip(chosen, q_per):
        pool = by_class[int(c)]
        take = rng.choice(pool, size=k_shot + int(nq), replace=False)
        sup_idx.extend(take[:k_shot])
        qry_idx.extend(take[k_shot:])
    sup_idx = np.asarray(sup_idx, dtype=np.int64)
    qry_idx = np.asarray(qry_idx, dtype=np.int64)
    return Episode(
        ds.images[sup_idx], labels[sup_idx], ds.images[qry_idx], labels[qry_idx]
    )
