"""Datasets: IDX (MNIST layout) and raw-tensor loaders, a bundled synthetic
10-class shape dataset for desk-scale runs, and proxy subset sampling."""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError

NUM_SHAPE_CLASSES = 10


@dataclass
class Dataset:
    """Images in [0,1], shape (N, C, H, W); first n_train samples are the train split."""
    images: np.ndarray
    labels: np.ndarray
    n_train: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N,C,H,W), got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError("images and labels length mismatch")
        if not (0 < self.n_train < len(self.images)):
            raise DatasetError("both train and validation splits must be nonempty")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images[: self.n_train], self.labels[: self.n_train]

    @property
    def val(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images[self.n_train:], self.labels[self.n_train:]


def make_proxy(d: Dataset, n_train: int, n_val: int, seed: int) -> Dataset:
    """Random disjoint proxy subsets, train drawn from train and val from val."""
    if n_train < 1 or n_val < 1:
        raise DatasetError("proxy splits must be nonempty")
    tr_imgs, tr_lbls = d.train
    va_imgs, va_lbls = d.val
    if n_train > len(tr_imgs) or n_val > len(va_imgs):
        raise DatasetError(
            f"proxy request ({n_train}/{n_val}) exceeds available splits "
            f"({len(tr_imgs)}/{len(va_imgs)})")
    rng = np.random.default_rng(seed)
    ti = rng.choice(len(tr_imgs), size=n_train, replace=False)
    vi = rng.choice(len(va_imgs), size=n_val, replace=False)
    images = np.concatenate([tr_imgs[ti], va_imgs[vi]])
    labels = np.concatenate([tr_lbls[ti], va_lbls[vi]])
    return Dataset(images=images, labels=labels, n_train=n_train)


# ---------------------------------------------------------------------------
# Synthetic shapes: 10 geometric classes rendered with jitter and noise.
# ---------------------------------------------------------------------------

def _render_shape(cls: int, hw: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((hw, hw), dtype=np.float32)
    half = rng.integers(4, 8)  # shape half-size in pixels
    cy = hw // 2 + rng.integers(-4, 5)
    cx = hw // 2 + rng.integers(-4, 5)
    cy = int(np.clip(cy, half + 1, hw - half - 2))
    cx = int(np.clip(cx, half + 1, hw - half - 2))
    val = float(rng.uniform(0.55, 1.0))
    t = int(rng.integers(1, 3))  # stroke thickness
    yy, xx = np.mgrid[0:hw, 0:hw]
    dy, dx = yy - cy, xx - cx

    if cls == 0:    # filled square
        img[(np.abs(dy) <= half) & (np.abs(dx) <= half)] = val
    elif cls == 1:  # square outline
        box = (np.abs(dy) <= half) & (np.abs(dx) <= half)
        inner = (np.abs(dy) <= half - t) & (np.abs(dx) <= half - t)
        img[box & ~inner] = val
    elif cls == 2:  # horizontal bar
        img[(np.abs(dy) <= t) & (np.abs(dx) <= half)] = val
    elif cls == 3:  # vertical bar
        img[(np.abs(dx) <= t) & (np.abs(dy) <= half)] = val
    elif cls == 4:  # plus
        img[(np.abs(dy) <= t) & (np.abs(dx) <= half)] = val
        img[(np.abs(dx) <= t) & (np.abs(dy) <= half)] = val
    elif cls == 5:  # diagonal cross
        d1 = np.abs(dy - dx) <= t
        d2 = np.abs(dy + dx) <= t
        box = (np.abs(dy) <= half) & (np.abs(dx) <= half)
        img[(d1 | d2) & box] = val
    elif cls == 6:  # ring
        r = np.sqrt(dy ** 2 + dx ** 2)
        img[(r <= half) & (r >= half - t - 0.5)] = val
    elif cls == 7:  # disk
        img[dy ** 2 + dx ** 2 <= half ** 2] = val
    elif cls == 8:  # triangle (filled, apex up)
        inside = (dy >= -half) & (dy <= half) & (np.abs(dx) <= (dy + half) / 2 + 0.5)
        img[inside] = val
    elif cls == 9:  # checkerboard patch
        box = (np.abs(dy) <= half) & (np.abs(dx) <= half)
        cells = ((yy // 2) + (xx // 2)) % 2 == 0
        img[box & cells] = val
    else:
        raise ValueError(f"unknown shape class {cls}")
    return img


def synthetic_shapes(n_train: int, n_val: int, seed: int = 0, hw: int = 28,
                     noise: float = 0.10) -> Dataset:
    """Bundled desk-scale dataset: 10 shape classes, reproducible by seed."""
    if n_train < 1 or n_val < 1:
        raise DatasetError("need at least one sample per split")
    rng = np.random.default_rng(seed)
    n = n_train + n_val
    labels = rng.integers(0, NUM_SHAPE_CLASSES, size=n).astype(np.int64)
    images = np.empty((n, 1, hw, hw), dtype=np.float32)
    for i, cls in enumerate(labels):
        img = _render_shape(int(cls), hw, rng)
        img += rng.normal(0.0, noise, size=img.shape).astype(np.float32)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images=images, labels=labels, n_train=n_train)


# ---------------------------------------------------------------------------
# IDX (MNIST layout): big-endian dims, optional .gz.
# ---------------------------------------------------------------------------

def _open_maybe_gz(path: str):
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path: str) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        magic = struct.unpack(">I", f.read(4))[0]
        ndim = magic & 0xFF
        if magic >> 8 != 0x000008:
            raise DatasetError(f"{path}: bad IDX magic {magic:#x} (want uint8 data)")
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: payload size does not match header dims {dims}")
    return data.reshape(dims)


def _find_idx(dirname: str, stem: str) -> str:
    for suffix in ("", ".gz"):
        p = os.path.join(dirname, stem + suffix)
        if os.path.exists(p):
            return p
    raise DatasetError(f"missing IDX file {stem}[.gz] in {dirname}")


def load_idx_dir(dirname: str) -> Dataset:
    """Load a directory holding the four standard MNIST-layout IDX files."""
    tr_x = _read_idx(_find_idx(dirname, "train-images-idx3-ubyte"))
    tr_y = _read_idx(_find_idx(dirname, "train-labels-idx1-ubyte"))
    te_x = _read_idx(_find_idx(dirname, "t10k-images-idx3-ubyte"))
    te_y = _read_idx(_find_idx(dirname, "t10k-labels-idx1-ubyte"))
    if len(tr_x) != len(tr_y) or len(te_x) != len(te_y):
        raise DatasetError("image/label counts disagree")
    images = np.concatenate([tr_x, te_x]).astype(np.float32) / 255.0
    images = images[:, None, :, :]
    labels = np.concatenate([tr_y, te_y]).astype(np.int64)
    return Dataset(images=images, labels=labels, n_train=len(tr_x))


# ---------------------------------------------------------------------------
# Raw-tensor directory: images.npy (N,C,H,W), labels.npy, optional split.json.
# ---------------------------------------------------------------------------

def load_raw_dir(dirname: str) -> Dataset:
    try:
        images = np.load(os.path.join(dirname, "images.npy"))
        labels = np.load(os.path.join(dirname, "labels.npy"))
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot load raw tensors from {dirname}: {e}") from e
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    images = images.astype(np.float32)
    split_path = os.path.join(dirname, "split.json")
    if os.path.exists(split_path):
        with open(split_path, "r", encoding="utf-8") as f:
            n_train = int(json.load(f)["n_train"])
    else:
        n_train = int(0.8 * len(images))
    return Dataset(images=images, labels=labels.astype(np.int64), n_train=n_train)


def save_raw_dir(d: Dataset, dirname: str) -> None:
    os.makedirs(dirname, exist_ok=True)
    np.save(os.path.join(dirname, "images.npy"), d.images)
    np.save(os.path.join(dirname, "labels.npy"), d.labels)
    with open(os.path.join(dirname, "split.json"), "w", encoding="utf-8") as f:
        json.dump({"n_train": d.n_train}, f)


def load_dataset(spec: str, seed: int = 0) -> Dataset:
    """Resolve a CLI dataset argument.

    ``synthetic[:N_TRAIN,N_VAL]`` builds the bundled shape dataset; a directory
    is probed for IDX files first, then for raw .npy tensors.
    """
    if spec.startswith("synthetic"):
        n_train, n_val = 4000, 1500
        if ":" in spec:
            parts = spec.split(":", 1)[1].split(",")
            n_train, n_val = int(parts[0]), int(parts[1])
        return synthetic_shapes(n_train, n_val, seed=seed)
    if not os.path.isdir(spec):
        raise DatasetError(f"dataset path {spec!r} is not a directory")
    try:
        _find_idx(spec, "train-images-idx3-ubyte")
        return load_idx_dir(spec)
    except DatasetError:
        pass
    return load_raw_dir(spec)
