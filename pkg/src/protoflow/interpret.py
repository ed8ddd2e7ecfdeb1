"""Explanations: prototype visualization through the inverse flow, truncated
samples, latent interpolation, prototypical-part heatmaps and the relevance
ordering test."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .data import QUANTIZED, Dataset, logit_range, model_inputs, undequantize
from .flow import FlowModel, embed
from .head import PrototypeHead, sample_truncated
from .numerics import DTYPE, as_rng


@torch.no_grad()
def _inverse(model: FlowModel, z) -> np.ndarray:
    z = torch.as_tensor(np.atleast_2d(np.asarray(z, dtype=np.float64)))
    return model.inverse(z).numpy()


def prototype_mean_image(model: FlowModel, head: PrototypeHead, c: int, k: int,
                         quantized: bool = False):
    """``f^-1(mu_ck)``; with ``quantized`` also its 8-bit rendering."""
    if not bool(head.active[c, k]):
        raise ValueError(f"component ({c}, {k}) is pruned")
    x = _inverse(model, head.means[c, k].detach().numpy())[0]
    if quantized:
        return x, undequantize(x).astype(np.uint8)
    return x


def prototype_samples(model, head, c, k, t, n, rng=None) -> np.ndarray:
    z = sample_truncated(head.component(c, k), t, n, rng)
    return _inverse(model, z)


def interpolate(model: FlowModel, x1, x2, steps: int) -> np.ndarray:
    """``f^-1((1 - a) f(x1) + a f(x2))`` for ``steps`` evenly spaced ``a``."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    z = embed(model, np.stack([np.asarray(x1, float), np.asarray(x2, float)]))
    a = np.linspace(0.0, 1.0, steps)[:, None]
    return _inverse(model, (1.0 - a) * z[0] + a * z[1])


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W)
    patch: Tuple[int, int]
    stride: Tuple[int, int]
    prototype: Tuple[int, int]
    query: Optional[int] = None


def _pair(v) -> Tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def _starts(size: int, patch: int, stride: int) -> List[int]:
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)  # keep full coverage without leaving the image
    return starts


def mean_input(dataset: Dataset) -> np.ndarray:
    """Pixel-wise mean image in the flow's input space."""
    x, _ = model_inputs(dataset)
    return x.mean(0)


@torch.no_grad()
def component_log_likelihood(model, head, x, c: int, k: int, batch_size: int = 1024) -> np.ndarray:
    """``log p_Z(f(x) | G_ck)`` for a batch of inputs."""
    z = embed(model, np.atleast_2d(x), batch_size)
    return head.component_log_density(torch.from_numpy(z))[:, c, k].numpy()


def parts_heatmap(model, head, dataset: Optional[Dataset], x, c: int, k: int,
                  patch=4, stride=None, image_shape=None, background=None,
                  query: Optional[int] = None) -> Heatmap:
    """Prototype-conditional likelihood of the query's patches.

    Each patch of ``x`` is pasted into the dataset mean image and the patched
    image is scored under component ``(c, k)``; the score is written to the
    patch's cells (averaged where patches overlap).
    """
    if image_shape is None:
        image_shape = dataset.image_shape if dataset is not None else None
    if image_shape is None:
        raise ValueError("heatmaps need image data")
    H, W, C = image_shape
    ph, pw = _pair(patch)
    sh, sw = _pair(stride if stride is not None else (ph, pw))
    if ph > H or pw > W or ph < 1 or pw < 1:
        raise ValueError(f"patch {ph}x{pw} larger than image {H}x{W}")
    if sh < 1 or sw < 1:
        raise ValueError("stride must be positive")
    if background is None:
        background = mean_input(dataset)
    bg = np.asarray(background, dtype=np.float64).reshape(H, W, C)
    q = np.asarray(x, dtype=np.float64).reshape(H, W, C)

    coords = [(i, j) for i in _starts(H, ph, sh) for j in _starts(W, pw, sw)]
    batch = np.repeat(bg[None], len(coords), axis=0)
    for b, (i, j) in enumerate(coords):
        batch[b, i:i + ph, j:j + pw] = q[i:i + ph, j:j + pw]
    scores = component_log_likelihood(model, head, batch.reshape(len(coords), -1), c, k)

    acc = np.zeros((H, W))
    cnt = np.zeros((H, W))
    for (i, j), s in zip(coords, scores):
        acc[i:i + ph, j:j + pw] += s
        cnt[i:i + ph, j:j + pw] += 1
    return Heatmap(acc / cnt, (ph, pw), (sh, sw), (c, k), query)


def top_percent_mask(heatmap: Union[Heatmap, np.ndarray], fraction: float = 0.05) -> np.ndarray:
    """Boolean mask of the ``ceil(fraction * n)`` highest cells; ties by row-major order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    flat = values.ravel()
    n_top = math.ceil(fraction * flat.size)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:n_top]] = True
    return mask.reshape(values.shape)


@dataclass
class RotCurve:
    pixels_restored: np.ndarray
    log_likelihood: np.ndarray
    source: str  # "heatmap" or "random"

    def area(self) -> float:
        """Trapezoidal area normalized by the pixel count."""
        x, y = self.pixels_restored.astype(float), self.log_likelihood
        return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)) / x[-1])


def relevance_ordering_test(model, head, x, heatmap: Heatmap, image_shape, rng=None,
                            batch_restore: int = 8, value_range=None,
                            start=None) -> Tuple[RotCurve, RotCurve]:
    """Restore pixels of ``x`` into a random image, most relevant first.

    The log-likelihood under the heatmap's prototype is recorded after every
    ``batch_restore`` pixels.  A second curve restores in a random order.
    ``start`` overrides the uniformly random starting image.
    """
    rng = as_rng(rng)
    H, W, C = image_shape
    if heatmap.values.shape != (H, W):
        raise ValueError("heatmap does not match the image")
    if batch_restore < 1:
        raise ValueError("batch_restore must be >= 1")
    c, k = heatmap.prototype
    q = np.asarray(x, dtype=np.float64).reshape(H * W, C)
    if start is None:
        lo, hi = value_range if value_range is not None else logit_range()
        start = rng.uniform(lo, hi, (H * W, C))
    start = np.asarray(start, dtype=np.float64).reshape(H * W, C)
    n_pix = H * W
    counts = list(range(0, n_pix, batch_restore)) + [n_pix]

    def curve(order, source):
        imgs = np.empty((len(counts), H * W * C))
        for r, m in enumerate(counts):
            img = start.copy()
            img[order[:m]] = q[order[:m]]
            imgs[r] = img.ravel()
        ll = component_log_likelihood(model, head, imgs, c, k)
        return RotCurve(np.asarray(counts), ll, source)

    model_order = np.argsort(-heatmap.values.ravel(), kind="stable")
    return curve(model_order, "heatmap"), curve(rng.permutation(n_pix), "random")


def most_likely_image(model, head, dataset: Dataset, c: int) -> int:
    """Index of the sample with the highest class-``c`` mixture density."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    x, _ = model_inputs(dataset)
    z = embed(model, x)
    with torch.no_grad():
        ll = head.class_log_likelihood(torch.from_numpy(z))[:, c].numpy()
    return int(np.argmax(ll))


# -- image output ---------------------------------------------------------------

def to_uint8(x, domain: str, image_shape, lo=None, hi=None) -> np.ndarray:
    """Render a flow input as an 8-bit (H, W, C) image."""
    x = np.asarray(x, dtype=np.float64)
    if domain == QUANTIZED:
        img = undequantize(x)
    else:
        lo = x.min() if lo is None else lo
        hi = x.max() if hi is None else hi
        img = np.clip((x - lo) / max(hi - lo, 1e-12) * 255.0, 0, 255)
    return np.rint(img).astype(np.uint8).reshape(image_shape)


def image_grid(images: Sequence[np.ndarray], ncols: int, pad: int = 1) -> np.ndarray:
    images = [np.asarray(im) for im in images]
    h, w, ch = images[0].shape
    nrows = math.ceil(len(images) / ncols)
    grid = np.zeros((nrows * (h + pad) + pad, ncols * (w + pad) + pad, ch), dtype=np.uint8)
    for n, im in enumerate(images):
        r, cc = divmod(n, ncols)
        grid[pad + r * (h + pad):pad + r * (h + pad) + h,
             pad + cc * (w + pad):pad + cc * (w + pad) + w] = im
    return grid


def write_pnm(path, image: np.ndarray) -> None:
    """Binary PGM (1 channel) or PPM (3 channels)."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 2:
        img = img[..., None]
    h, w, ch = img.shape
    if ch == 1:
        magic = b"P5"
    elif ch == 3:
        magic = b"P6"
    else:
        raise ValueError("PNM output needs 1 or 3 channels")
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    w, h = int(tokens[1]), int(tokens[2])
    ch = 1 if tokens[0] == b"P5" else 3
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * ch, offset=pos).reshape(h, w, ch)
