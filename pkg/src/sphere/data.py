"""Dataset ingestion and synthesis: CIFAR-10 binary files, IDX ubyte
files, spectrum-controlled Gaussian matrices for oracle experiments, and a
class-structured synthetic image generator for desk-scale runs.

Loaded datasets keep raw uint8 pixels so ingestion can be round-tripped
bit-exactly; normalization produces a separate float view.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .linalg import NumericsError

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes, CHW order
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


class FormatError(ValueError):
    """Dataset file does not match the expected binary layout."""


@dataclass
class Dataset:
    """Raw image dataset: uint8 pixels (B,C,H,W) plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    split: str = "train"

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0


# ---------------------------------------------------------------------------
# CIFAR-10 binary format


def _parse_cifar_records(buf: bytes, source: str) -> Dataset:
    if len(buf) % CIFAR_RECORD != 0:
        raise FormatError(
            f"{source}: truncated file, {len(buf)} bytes is not a multiple of {CIFAR_RECORD}"
        )
    n = len(buf) // CIFAR_RECORD
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        off = int(bad[0]) * CIFAR_RECORD
        raise FormatError(f"{source}: label byte {labels[bad[0]]} > 9 at byte offset {off}")
    images = raw[:, 1:].reshape(n, 3, 32, 32).copy()
    return Dataset(images=images, labels=labels.copy(), name="cifar10", split="")


def load_cifar10(path: str, split: str = "train") -> Dataset:
    """Load CIFAR-10 from its standard binary layout.

    `path` may be a directory holding data_batch_*.bin / test_batch.bin, or
    a single .bin file.
    """
    if os.path.isdir(path):
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [os.path.join(path, f) for f in names]
        missing = [f for f in files if not os.path.exists(f)]
        if missing:
            raise FormatError(
                f"missing CIFAR-10 files {missing}; expected layout: {path}/<data_batch_N.bin|test_batch.bin>"
            )
    else:
        if not os.path.exists(path):
            raise FormatError(f"no such file: {path}")
        files = [path]
    parts = []
    for f in files:
        with open(f, "rb") as fh:
            parts.append(_parse_cifar_records(fh.read(), f))
    ds = Dataset(
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        name="cifar10",
        split=split,
    )
    return ds


def serialize_cifar10(ds: Dataset) -> bytes:
    """Re-serialize a dataset into CIFAR-10 binary records (round-trip
    inverse of the loader, before any normalization)."""
    n = len(ds)
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = ds.labels.astype(np.uint8)
    rec[:, 1:] = ds.images.reshape(n, -1)
    return rec.tobytes()


def write_cifar10(ds: Dataset, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_cifar10(ds))


# ---------------------------------------------------------------------------
# IDX ubyte format (small-image alternates)


def load_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, n, h, w = struct.unpack(">IIII", fh.read(16))
        if magic != 0x00000803:
            raise FormatError(f"{path}: bad IDX image magic {magic:#010x}")
        buf = fh.read()
    if len(buf) != n * h * w:
        raise FormatError(f"{path}: truncated IDX image payload")
    return np.frombuffer(buf, dtype=np.uint8).reshape(n, 1, h, w).copy()


def load_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, n = struct.unpack(">II", fh.read(8))
        if magic != 0x00000801:
            raise FormatError(f"{path}: bad IDX label magic {magic:#010x}")
        buf = fh.read()
    if len(buf) != n:
        raise FormatError(f"{path}: truncated IDX label payload")
    return np.frombuffer(buf, dtype=np.uint8).astype(np.int64)


# ---------------------------------------------------------------------------
# normalization


def channel_stats(ds: Dataset):
    """Per-channel mean/std of pixels scaled to [0,1] (train-split stats)."""
    x = ds.images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def save_stats(path: str, mean, std) -> None:
    with open(path, "w") as fh:
        json.dump({"mean": list(map(float, mean)), "std": list(map(float, std))}, fh)


def load_stats(path: str):
    with open(path) as fh:
        d = json.load(fh)
    return np.asarray(d["mean"]), np.asarray(d["std"])


def to_float(ds: Dataset, mean, std, dtype=np.float64) -> np.ndarray:
    """Scale pixels to [0,1] then standardize per channel."""
    x = ds.images.astype(dtype) / 255.0
    mean = np.asarray(mean, dtype=dtype)[None, :, None, None]
    std = np.asarray(std, dtype=dtype)[None, :, None, None]
    return (x - mean) / std


# ---------------------------------------------------------------------------
# subsetting and batching


def subset(ds: Dataset, n_per_class: int, seed: int) -> Dataset:
    """Stratified, seeded selection of n_per_class samples per class."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in np.unique(ds.labels):
        idx = np.nonzero(ds.labels == c)[0]
        if len(idx) < n_per_class:
            raise NumericsError(f"class {c} has only {len(idx)} samples, need {n_per_class}")
        picks.append(rng.choice(idx, size=n_per_class, replace=False))
    order = np.sort(np.concatenate(picks))
    return Dataset(images=ds.images[order], labels=ds.labels[order], name=ds.name, split=ds.split)


def batch_indices(n: int, batch_size: int, rng, drop_last: bool = True):
    """Seeded shuffled batches of indices; the short final batch is dropped
    during training so Gram sizes stay constant."""
    order = rng.permutation(n)
    end = (n // batch_size) * batch_size if drop_last else n
    return [order[i : i + batch_size] for i in range(0, end, batch_size)]


# ---------------------------------------------------------------------------
# synthetic generators


@dataclass
class SyntheticSpec:
    """Spectrum-controlled Gaussian matrix: B x N with prescribed singular
    values (sorted descending, nonnegative)."""

    b: int
    n: int
    spectrum: np.ndarray
    seed: int = 0

    def __post_init__(self):
        s = np.asarray(self.spectrum, dtype=np.float64)
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise NumericsError("spectrum must be sorted descending and nonnegative")
        self.spectrum = s


def synth_gaussian(spec: SyntheticSpec) -> np.ndarray:
    """X = U diag(sigma) V^T with seeded random orthonormal U, V."""
    r = len(spec.spectrum)
    if r > spec.n:
        raise NumericsError("more singular values than columns")
    if spec.b < r and np.any(spec.spectrum[spec.b :] > 0):
        import warnings

        warnings.warn("B < number of nonzero singular values; spectrum truncated by rank")
    rng = np.random.default_rng(spec.seed)
    u, _ = np.linalg.qr(rng.standard_normal((spec.b, min(spec.b, r))))
    v, _ = np.linalg.qr(rng.standard_normal((spec.n, min(spec.b, r))))
    k = u.shape[1]
    return (u * spec.spectrum[:k]) @ v.T


def harmonic_spectrum(n: int) -> np.ndarray:
    """sigma_i = 1/i, the spectrum used throughout the oracle experiments."""
    return 1.0 / np.arange(1, n + 1, dtype=np.float64)


def make_synthetic_images(n_per_class: int, seed: int, classes: int = 10,
                          size: int = 32, noise: float = 0.35,
                          split: str = "train", template_seed: int = 0,
                          max_shift: int = 0) -> Dataset:
    """Class-structured synthetic image set in CIFAR-10 shape.

    Each class is a smooth color template drawn from `template_seed` (keep
    it fixed across splits); samples draw gain/shift and pixel noise from
    `seed`.  Used when no real dataset is mounted.
    """
    trng = np.random.default_rng(template_seed)
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    templates = []
    for _ in range(classes):
        t = np.zeros((3, size, size))
        for c in range(3):
            for _ in range(3):
                fx, fy = trng.uniform(0.5, 3.0, size=2)
                ph = trng.uniform(0, 2 * np.pi, size=2)
                t[c] += trng.uniform(0.3, 1.0) * np.sin(2 * np.pi * fx * xx + ph[0]) * np.sin(
                    2 * np.pi * fy * yy + ph[1]
                )
        t = (t - t.min()) / (t.max() - t.min())
        templates.append(t)
    images = np.empty((classes * n_per_class, 3, size, size), dtype=np.uint8)
    labels = np.empty(classes * n_per_class, dtype=np.int64)
    i = 0
    for c in range(classes):
        for _ in range(n_per_class):
            gain = rng.uniform(0.6, 1.0)
            shift = rng.uniform(-0.1, 0.1)
            base = templates[c]
            if max_shift:
                dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
                base = np.roll(base, (int(dy), int(dx)), axis=(1, 2))
            img = gain * base + shift + noise * rng.standard_normal((3, size, size))
            images[i] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
            labels[i] = c
            i += 1
    order = rng.permutation(len(labels))
    return Dataset(images=images[order], labels=labels[order], name="synthetic", split=split)


def make_texture_images(n_per_class: int, seed: int, classes: int = 10,
                        size: int = 32, contrast: float = 0.12, noise: float = 0.3,
                        template_amp: float = 0.0, template_seed: int = 0,
                        split: str = "train") -> Dataset:
    """Texture-class synthetic image set: each class is an oriented
    frequency band, samples are band-filtered white noise plus optional
    smooth class template and iid pixel noise.

    Class information lives in second-order statistics, so a linear readout
    of raw pixels is near chance; this is the harder surrogate used by the
    classification experiments when no real dataset is mounted.
    """
    trng = np.random.default_rng(template_seed)
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    rad = np.hypot(fy, fx)
    theta = np.arctan2(fy, fx)
    masks = []
    templates = []
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    for _ in range(classes):
        ang = trng.uniform(0, np.pi)
        f0 = trng.uniform(0.08, 0.35)
        bw = trng.uniform(0.03, 0.08)
        d = np.minimum(np.abs(((theta - ang + np.pi / 2) % np.pi) - np.pi / 2), np.pi)
        masks.append(np.exp(-((rad - f0) ** 2) / (2 * bw ** 2)) * np.exp(-(d ** 2) / (2 * 0.3 ** 2)))
        t = np.zeros((3, size, size))
        for c in range(3):
            fxy = trng.uniform(0.5, 2.5, size=2)
            ph = trng.uniform(0, 2 * np.pi, size=2)
            t[c] = np.sin(2 * np.pi * fxy[0] * xx + ph[0]) * np.sin(2 * np.pi * fxy[1] * yy + ph[1])
        templates.append(t)
    images = np.empty((classes * n_per_class, 3, size, size), dtype=np.uint8)
    labels = np.empty(classes * n_per_class, dtype=np.int64)
    i = 0
    for c in range(classes):
        for _ in range(n_per_class):
            img = np.empty((3, size, size))
            for ch in range(3):
                w = rng.standard_normal((size, size))
                t = np.fft.ifft2(np.fft.fft2(w) * masks[c]).real
                img[ch] = t / (t.std() + 1e-9)
            img = 0.5 + contrast * img + template_amp * templates[c] \
                + noise * rng.standard_normal((3, size, size))
            images[i] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
            labels[i] = c
            i += 1
    order = rng.permutation(len(labels))
    return Dataset(images=images[order], labels=labels[order], name="texture", split=split)


def resize_to_32(images: np.ndarray) -> np.ndarray:
    """Center-crop/downsample 64x64-style sources to 32x32 (2x2 mean) so
    transfer runs can pair with CIFAR-shaped models."""
    b, c, h, w = images.shape
    if (h, w) == (32, 32):
        return images
    if h >= 64 and w >= 64:
        top, left = (h - 64) // 2, (w - 64) // 2
        crop = images[:, :, top : top + 64, left : left + 64].astype(np.float64)
        small = crop.reshape(b, c, 32, 2, 32, 2).mean(axis=(3, 5))
        return np.clip(small, 0, 255).astype(images.dtype)
    raise NumericsError(f"unsupported source size {h}x{w}")
