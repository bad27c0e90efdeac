"""Synthetic image tasks with closed-form labeling rules, deterministic
splits, and a binary dataset file format.

Each generator is a pure function of (task spec, sample index): the label
is ``index % num_classes`` (balanced within one sample by construction)
and all remaining randomness comes from ``default_rng([seed, index])``.
At noise_std=0 every generator is exactly recoverable by the rule-based
labeler in ``oracle_label``, so the tasks are learnable by construction.

Kinds: STRIPES (sinusoidal grating, class = orientation x frequency),
BLOBS (one Gaussian blob, class = width), COUNT (class = number of 2x2
dots), XOR_PATCH (class = number of bright corner cells mod K).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

STRIPES = "stripes"
BLOBS = "blobs"
COUNT = "count"
XOR_PATCH = "xor_patch"
KINDS = (STRIPES, BLOBS, COUNT, XOR_PATCH)

DATA_MAGIC = b"GSTDATA1"
DATA_VERSION = 1


@dataclass(frozen=True)
class TaskSpec:
    generator: str
    image_side: int = 16
    channels: int = 1
    num_classes: int = 4
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.generator not in KINDS:
            raise ConfigError(f"unknown generator {self.generator!r}, expected one of {KINDS}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.generator == STRIPES and self.num_classes > 2 * (self.image_side // 2 - 1):
            raise ConfigError("stripe frequencies exceed Nyquist for this image size")
        if self.generator == BLOBS:
            sigma_max = _blob_sigma(self.num_classes - 1)
            if 2 * _blob_margin(sigma_max) + 2 > self.image_side:
                raise ConfigError("largest blob does not fit the image with its margin")
        if self.generator == COUNT and self.num_classes > 8:
            raise ConfigError("count task supports at most 8 classes")
        if self.generator == XOR_PATCH and self.num_classes > 5:
            raise ConfigError("xor_patch supports at most 5 classes (0..4 bright corners)")

    def to_dict(self):
        return {
            "generator": self.generator,
            "image_side": self.image_side,
            "channels": self.channels,
            "num_classes": self.num_classes,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SplitSpec:
    train_n: int = 800
    val_n: int = 200
    test_n: int = 2000
    few_shot_k: int | None = None

    def __post_init__(self):
        if min(self.train_n, self.val_n, self.test_n) < 1:
            raise ConfigError("split sizes must be positive")

    def to_dict(self):
        return {"train_n": self.train_n, "val_n": self.val_n, "test_n": self.test_n,
                "few_shot_k": self.few_shot_k}


@dataclass
class Dataset:
    images: np.ndarray   # (n, C, H, W) float32 in [0, 1]
    labels: np.ndarray   # (n,) int64
    indices: np.ndarray  # generator sample ids, for disjointness checks

    def __len__(self):
        return self.images.shape[0]


def _blob_sigma(k):
    return 0.7 + 0.4 * k


def _blob_margin(sigma):
    # 1.5 sigma from each edge cuts < 7% of mass per edge, small against the
    # ~2.5x mass ratio between adjacent width classes
    return int(np.ceil(1.5 * sigma)) + 1


def _stripes(side, label, rng):
    orientation = label % 2
    freq = 1 + label // 2
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(side) / side
    wave = 0.5 + 0.45 * np.sin(2.0 * np.pi * freq * t + phase)
    return np.tile(wave[:, None], (1, side)) if orientation == 0 else np.tile(wave[None, :], (side, 1))


def _blobs(side, label, rng):
    sigma = _blob_sigma(label)
    m = _blob_margin(sigma)
    cy = rng.uniform(m, side - m)
    cx = rng.uniform(m, side - m)
    yy, xx = np.mgrid[0:side, 0:side]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))


def _count(side, label, rng):
    img = np.zeros((side, side))
    n_dots = label + 1
    placed = []
    while len(placed) < n_dots:
        y = int(rng.integers(0, side - 1))
        x = int(rng.integers(0, side - 1))
        if all(abs(y - py) > 2 or abs(x - px) > 2 for py, px in placed):
            placed.append((y, x))
    for y, x in placed:
        img[y:y + 2, x:x + 2] = 1.0
    return img


def _xor_patch(side, label, rng, num_classes):
    cell = side // 4
    corners = [(0, 0), (0, side - cell), (side - cell, 0), (side - cell, side - cell)]
    combos = [c for c in range(16) if bin(c).count("1") % num_classes == label]
    bits = int(combos[int(rng.integers(0, len(combos)))])
    img = np.zeros((side, side))
    for i, (y, x) in enumerate(corners):
        if bits >> i & 1:
            img[y:y + cell, x:x + cell] = 1.0
    return img


def sample(spec, index):
    """Deterministic (image, label) for one generator index."""
    label = index % spec.num_classes
    rng = np.random.default_rng([spec.seed, index])
    side = spec.image_side
    if spec.generator == STRIPES:
        base = _stripes(side, label, rng)
    elif spec.generator == BLOBS:
        base = _blobs(side, label, rng)
    elif spec.generator == COUNT:
        base = _count(side, label, rng)
    else:
        base = _xor_patch(side, label, rng, spec.num_classes)
    img = np.repeat(base[None, :, :], spec.channels, axis=0)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32), label


def generate_indices(spec, indices):
    indices = np.asarray(indices, dtype=np.int64)
    images = np.empty((len(indices), spec.channels, spec.image_side, spec.image_side),
                      dtype=np.float32)
    labels = np.empty(len(indices), dtype=np.int64)
    for row, idx in enumerate(indices):
        images[row], labels[row] = sample(spec, int(idx))
    return Dataset(images, labels, indices)


def generate(spec, n):
    """First n samples of the stream; class histogram balanced within +-1."""
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    return generate_indices(spec, np.arange(n))


def make_splits(spec, split):
    """Disjoint train/val/test from consecutive index ranges; optional
    few-shot mode keeps exactly k samples per class from the train range."""
    train_idx = np.arange(0, split.train_n)
    val_idx = np.arange(split.train_n, split.train_n + split.val_n)
    test_idx = np.arange(split.train_n + split.val_n,
                         split.train_n + split.val_n + split.test_n)
    if split.few_shot_k is not None:
        k = split.few_shot_k
        if k * spec.num_classes > split.train_n:
            raise ConfigError(
                f"{k}-shot x {spec.num_classes} classes exceeds the train pool of {split.train_n}"
            )
        per_class = [train_idx[train_idx % spec.num_classes == c][:k]
                     for c in range(spec.num_classes)]
        train_idx = np.sort(np.concatenate(per_class))
    return (generate_indices(spec, train_idx),
            generate_indices(spec, val_idx),
            generate_indices(spec, test_idx))


# ---------------------------------------------------------------------------
# closed-form labeling rules (exact at noise_std = 0)
# ---------------------------------------------------------------------------

def _oracle_stripes(img, spec):
    side = spec.image_side
    row_profile = img.mean(axis=1)
    col_profile = img.mean(axis=0)
    orientation = 0 if row_profile.var() >= col_profile.var() else 1
    profile = row_profile if orientation == 0 else col_profile
    mags = np.abs(np.fft.rfft(profile - profile.mean()))
    freq = int(np.argmax(mags[1:side // 2 + 1])) + 1
    return 2 * (freq - 1) + orientation


def _oracle_blobs(img, spec):
    mass = float(img.sum())
    expected = [2.0 * np.pi * _blob_sigma(k) ** 2 for k in range(spec.num_classes)]
    return int(np.argmin([abs(np.log(mass) - np.log(e)) for e in expected]))


def _oracle_count(img, spec):
    return int(round(float((img > 0.5).sum()) / 4.0)) - 1


def _oracle_xor(img, spec):
    side, cell = spec.image_side, spec.image_side // 4
    corners = [(0, 0), (0, side - cell), (side - cell, 0), (side - cell, side - cell)]
    bright = sum(1 for y, x in corners if img[y:y + cell, x:x + cell].mean() > 0.5)
    return bright % spec.num_classes


def oracle_label(spec, image):
    """Rule-based labeler; classifies noise-free samples perfectly."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    rule = {STRIPES: _oracle_stripes, BLOBS: _oracle_blobs,
            COUNT: _oracle_count, XOR_PATCH: _oracle_xor}[spec.generator]
    return rule(img, spec)


# ---------------------------------------------------------------------------
# binary dataset file
# ---------------------------------------------------------------------------

def write_dataset(dataset, spec, path):
    header = {
        "spec": spec.to_dict(),
        "count": len(dataset),
        "channels": int(dataset.images.shape[1]),
        "side": int(dataset.images.shape[2]),
        "indices": dataset.indices.tolist(),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<I", DATA_VERSION))
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(dataset.images.astype("<f4", copy=False).tobytes())
        f.write(dataset.labels.astype("<u2").tobytes())


def read_dataset(path):
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated reading {what} at offset {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    magic = take(8, "magic")
    if magic != DATA_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != DATA_VERSION:
        raise FormatError(f"unsupported version {version} at offset 8")
    hlen = struct.unpack("<I", take(4, "header length"))[0]
    header = json.loads(take(hlen, "header").decode("utf-8"))
    spec = TaskSpec(**header["spec"])
    n, c, side = header["count"], header["channels"], header["side"]
    img_bytes = take(n * c * side * side * 4, "image payload")
    images = np.frombuffer(img_bytes, dtype="<f4").reshape(n, c, side, side).astype(np.float32)
    labels = np.frombuffer(take(n * 2, "labels"), dtype="<u2").astype(np.int64)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes at offset {pos}")
    return Dataset(images, labels, np.asarray(header["indices"], dtype=np.int64)), spec
