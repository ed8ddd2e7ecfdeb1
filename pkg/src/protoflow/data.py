"""Datasets, dequantization and the augmentation pipeline."""
from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .numerics import as_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
ALPHA = 0.05

CONTINUOUS = "continuous"
QUANTIZED = "quantized_8bit"


class IDXFormatError(ValueError):
    """Malformed IDX file."""


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    image_shape: Optional[Tuple[int, int, int]] = None
    value_domain: str = CONTINUOUS

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a 2-d array (n, d)")
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if len(self.labels) != len(self.samples):
            raise ValueError("samples and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if self.image_shape is not None:
            self.image_shape = tuple(int(s) for s in self.image_shape)
            if int(np.prod(self.image_shape)) != self.samples.shape[1]:
                raise ValueError("image_shape does not match sample dimension")
        if self.value_domain not in (CONTINUOUS, QUANTIZED):
            raise ValueError(f"unknown value domain {self.value_domain!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, samples=self.samples[idx], labels=self.labels[idx])

    def split(self, fraction: float, rng=None) -> Tuple["Dataset", "Dataset"]:
        """Random ``(rest, held_out)`` split with ``fraction`` held out."""
        perm = as_rng(rng).permutation(len(self))
        n_out = int(round(fraction * len(self)))
        return self.subset(np.sort(perm[n_out:])), self.subset(np.sort(perm[:n_out]))


# -- IDX ----------------------------------------------------------------------

def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def _read_idx(path, magic):
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise IDXFormatError(f"{path}: truncated file")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{got:08x} (expected 0x{magic:08x})")
    ndim = got & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: truncated file")
    shape = struct.unpack(">" + "I" * ndim, raw[4:header])
    n = int(np.prod(shape))
    if len(raw) - header < n:
        raise IDXFormatError(f"{path}: truncated file")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(shape)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) as a quantized Dataset."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if len(images) != len(labels):
        raise IDXFormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    n, h, w = images.shape
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 1
    return Dataset(images.reshape(n, h * w).astype(np.float64), labels, num_classes,
                   (h, w, 1), QUANTIZED)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    if dataset.image_shape is None or dataset.image_shape[2] != 1:
        raise ValueError("IDX export needs single-channel image data")
    h, w, _ = dataset.image_shape
    pixels = dataset.samples
    if pixels.min() < 0 or pixels.max() > 255 or np.any(pixels != np.round(pixels)):
        raise ValueError("IDX export needs integer pixels in [0, 255]")
    with _open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, len(dataset), h, w))
        f.write(pixels.astype(np.uint8).tobytes())
    with _open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(dataset)))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def downscale(dataset: Dataset, factor: int = 2) -> Dataset:
    """Average-pool images by ``factor``; quantized data is re-rounded."""
    h, w, ch = dataset.image_shape
    if h % factor or w % factor:
        raise ValueError("image size not divisible by factor")
    imgs = dataset.samples.reshape(-1, h // factor, factor, w // factor, factor, ch).mean((2, 4))
    if dataset.value_domain == QUANTIZED:
        imgs = np.floor(imgs + 0.5)
    return replace(dataset, samples=imgs.reshape(len(dataset), -1),
                   image_shape=(h // factor, w // factor, ch))


# -- synthetic ----------------------------------------------------------------

def make_two_moons(n: int, noise_sigma: float = 0.05, rng=None) -> Dataset:
    """Two interleaved unit half circles, ``n / 2`` points each."""
    if n % 2:
        raise ValueError("n must be even")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = as_rng(rng)
    m = n // 2
    t = np.linspace(0.0, math.pi, m)
    outer = np.stack([np.cos(t), np.sin(t)], 1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], 1)
    x = np.concatenate([outer, inner])
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, x.shape)
    y = np.repeat([0, 1], m)
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], 2)


def make_gaussian_grid(n: int, grid: int = 3, spacing: float = 3.0, sigma: float = 0.5,
                       num_classes: int = 3, rng=None) -> Dataset:
    """Isotropic blobs on a ``grid x grid`` lattice; blob ``i`` has class ``i % num_classes``."""
    rng = as_rng(rng)
    centers = spacing * np.array([(i, j) for i in range(grid) for j in range(grid)], dtype=float)
    centers -= centers.mean(0)
    which = rng.integers(0, len(centers), n)
    x = centers[which] + rng.normal(0.0, sigma, (n, 2))
    return Dataset(x, which % num_classes, num_classes)


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.samples, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, num_classes: Optional[int] = None) -> Dataset:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    labels = arr[:, -1].astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(arr[:, :-1], labels, num_classes)


# -- dequantization -------------------------------------------------------------

def _logit(p):
    return np.log(p) - np.log1p(-p)


def dequantize(pixels, rng=None, alpha: float = ALPHA, u=None):
    """Map 8-bit pixels to continuous logit space.

    ``y = (pixel + u) / 256`` with ``u ~ U[0, 1)`` (or the given ``u``), then
    ``x = logit(alpha + (1 - 2 alpha) y)``.  Returns ``(x, logdet)`` where
    ``logdet`` is the per-sample sum of ``log dx/d(pixel + u)``; adding it to
    ``log p(x)`` gives the density in 8-bit pixel units.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.size and (pixels.min() < 0 or pixels.max() > 255):
        raise ValueError("pixel out of range [0, 255]")
    if u is None:
        u = as_rng(rng).uniform(0.0, 1.0, pixels.shape)
    p = alpha + (1.0 - 2.0 * alpha) * (pixels + u) / 256.0
    x = _logit(p)
    log_deriv = math.log(1.0 - 2.0 * alpha) - math.log(256.0) - np.log(p) - np.log1p(-p)
    logdet = log_deriv.sum(-1) if pixels.ndim > 1 else log_deriv
    return x, logdet


def undequantize(x, alpha: float = ALPHA) -> np.ndarray:
    """Inverse of :func:`dequantize` followed by ``floor``; clipped to [0, 255]."""
    p = 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))
    v = (p - alpha) / (1.0 - 2.0 * alpha) * 256.0
    return np.clip(np.floor(v + 1e-9), 0, 255)


def logit_range(alpha: float = ALPHA) -> Tuple[float, float]:
    """Range of dequantized values (pixel 0, u=0) to (pixel 255, u->1)."""
    return float(_logit(alpha)), float(_logit(1.0 - alpha))


def model_inputs(dataset: Dataset, rng=None, alpha: float = ALPHA):
    """Flow inputs and their log-det offsets for a dataset.

    Continuous data passes through with zero offset.  Quantized data is
    dequantized with ``u ~ U[0, 1)`` from ``rng``, or at bin centers
    (``u = 0.5``) when ``rng`` is None.
    """
    if dataset.value_domain == CONTINUOUS:
        return dataset.samples, np.zeros(len(dataset))
    u = 0.5 if rng is None else None
    return dequantize(dataset.samples, rng, alpha, u=u)


# -- augmentation ---------------------------------------------------------------

@dataclass
class AugmentationSpec:
    hflip_prob: float = 0.5
    rotate_deg: float = 15.0
    translate_frac: float = 0.04
    shear_deg: float = 10.0
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        for name in ("rotate_deg", "translate_frac", "shear_deg", "jitter_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def affine_image(img: np.ndarray, rotate_deg=0.0, shift=(0.0, 0.0), shear_deg=0.0,
                 flip=False, pad: Optional[int] = None) -> np.ndarray:
    """Flip, edge-pad, warp about the center (bilinear) and center-crop one image.

    ``img`` has shape (H, W, C); ``shift`` is (rows, cols) in pixels.
    """
    if flip:
        img = img[:, ::-1]
    h, w = img.shape[:2]
    if pad is None:
        pad = max(h, w) // 4 + 1
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    th, sh = math.radians(rotate_deg), math.radians(shear_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shear = np.array([[1.0, 0.0], [math.tan(sh), 1.0]])
    forward = rot @ shear  # output = forward @ (input - c) + c + shift
    inv = np.linalg.inv(forward)
    center = (np.array(padded.shape[:2], dtype=float) - 1.0) / 2.0
    offset = center - inv @ (center + np.asarray(shift, dtype=float))
    out = np.empty_like(padded)
    for ch in range(padded.shape[2]):
        out[..., ch] = ndimage.affine_transform(padded[..., ch], inv, offset=offset,
                                                order=1, mode="nearest")
    return out[pad:pad + h, pad:pad + w]


def _augment_images(x: np.ndarray, image_shape, spec: AugmentationSpec, rng) -> np.ndarray:
    h, w, ch = image_shape
    imgs = x.reshape(-1, h, w, ch)
    out = np.empty_like(imgs)
    n = len(imgs)
    flips = rng.uniform(size=n) < spec.hflip_prob
    rots = rng.uniform(-spec.rotate_deg, spec.rotate_deg, n)
    shifts = rng.uniform(-spec.translate_frac, spec.translate_frac, (n, 2)) * np.array([h, w])
    shears = rng.uniform(-spec.shear_deg, spec.shear_deg, n)
    for i in range(n):
        if not flips[i] and rots[i] == 0 and shears[i] == 0 and not shifts[i].any():
            out[i] = imgs[i]
        else:
            out[i] = affine_image(imgs[i], rots[i], shifts[i], shears[i], flips[i])
    return out.reshape(len(x), -1)


def augment(x: np.ndarray, spec: AugmentationSpec, rng=None, image_shape=None) -> np.ndarray:
    """One draw of the augmentation pipeline for a batch of flat samples."""
    rng = as_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    if image_shape is not None:
        x = _augment_images(x, image_shape, spec, rng)
    if spec.jitter_sigma > 0:
        x = x + rng.normal(0.0, spec.jitter_sigma, x.shape)
    return x


def augment_pair(x: np.ndarray, spec: AugmentationSpec, rng=None, image_shape=None):
    """Two independent augmentations of the same batch."""
    rng = as_rng(rng)
    return augment(x, spec, rng, image_shape), augment(x, spec, rng, image_shape)
