"""Synthetic blur kernels and seeded (blurry, sharp) patch datasets."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from ..errors import ValidationError

GAUSSIAN_SIGMA_RANGE = (1.0, 3.0)
MOTION_LENGTH_RANGE = (5.0, 15.0)


@dataclass(frozen=True)
class BlurSpec:
    """A normalized blur kernel description.

    ``kind`` is ``"gaussian"`` (uses ``sigma``) or ``"linear-motion"``
    (uses ``length`` in pixels and ``angle`` in degrees).  ``sigma == 0``
    and ``length == 1`` both give the delta kernel.
    """

    kind: str
    sigma: float = 0.0
    length: float = 1.0
    angle: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "linear-motion"):
            raise ValidationError(f"unknown blur kind {self.kind!r}")
        if self.kind == "gaussian" and not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValidationError(f"gaussian sigma must be finite and >= 0, got {self.sigma}")
        if self.kind == "linear-motion" and not (self.length >= 1 and math.isfinite(self.length)):
            raise ValidationError(f"motion length must be >= 1, got {self.length}")

    def kernel(self) -> np.ndarray:
        if self.kind == "gaussian":
            return gaussian_kernel(self.sigma)
        return motion_kernel(self.length, self.angle)

    def describe(self) -> str:
        if self.kind == "gaussian":
            return f"gaussian(sigma={self.sigma:.4g})"
        return f"motion(length={self.length:.4g},angle={self.angle:.4g})"


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.ones((1, 1))
    r = int(math.ceil(3 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma**2))
    return k / k.sum()


def motion_kernel(length: float, angle: float) -> np.ndarray:
    """Anti-aliased line segment of ``length`` pixels through the kernel center."""
    if length <= 1:
        return np.ones((1, 1))
    r = int(math.ceil(length / 2)) + 1
    size = 2 * r + 1
    k = np.zeros((size, size))
    theta = math.radians(angle)
    n = int(math.ceil(length)) * 8 + 1
    t = np.linspace(-(length - 1) / 2, (length - 1) / 2, n)
    xs = r + t * math.cos(theta)
    ys = r + t * math.sin(theta)
    x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
    fx, fy = xs - x0, ys - y0
    for dx, wx in ((0, 1 - fx), (1, fx)):
        for dy, wy in ((0, 1 - fy), (1, fy)):
            np.add.at(k, (x0 + dx, y0 + dy), wx * wy)
    return k / k.sum()


def synth_blur(sharp: np.ndarray, spec: BlurSpec) -> np.ndarray:
    """Convolve each channel of a ``(W, H, C)`` image with ``spec``'s kernel.

    Borders are handled by clamping to the nearest edge pixel.
    """
    sharp = np.asarray(sharp, dtype=np.float64)
    if sharp.ndim != 3:
        raise ValidationError(f"expected a (W, H, C) image, got shape {sharp.shape}")
    k = spec.kernel()
    out = np.empty_like(sharp)
    for c in range(sharp.shape[-1]):
        out[..., c] = ndimage.convolve(sharp[..., c], k, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def sample_blur_spec(rng: np.random.Generator) -> BlurSpec:
    """Draw from the default family: Gaussian or linear motion, equally likely."""
    if rng.random() < 0.5:
        return BlurSpec("gaussian", sigma=float(rng.uniform(*GAUSSIAN_SIGMA_RANGE)))
    return BlurSpec(
        "linear-motion",
        length=float(rng.uniform(*MOTION_LENGTH_RANGE)),
        angle=float(rng.uniform(0.0, 180.0)),
    )


@dataclass
class Pair:
    blurry: np.ndarray
    sharp: np.ndarray
    spec: BlurSpec
    source: int
    origin: tuple[int, int]
    name: str = ""


@dataclass
class Dataset:
    train: list[Pair] = field(default_factory=list)
    val: list[Pair] = field(default_factory=list)

    def digest(self) -> str:
        """SHA-256 over every patch, in order; identical datasets share it."""
        h = hashlib.sha256()
        for split in (self.train, self.val):
            for p in split:
                h.update(np.ascontiguousarray(p.blurry).tobytes())
                h.update(np.ascontiguousarray(p.sharp).tobytes())
        return h.hexdigest()


def make_dataset(
    source_images: Sequence[np.ndarray],
    specs: Optional[Sequence[BlurSpec]] = None,
    patch_size: int = 96,
    seed: int = 0,
    n_train: int = 32,
    n_val: int = 8,
) -> Dataset:
    """Crop distinct sharp patches and blur each with an assigned kernel.

    The first ``n_train`` crops form the training split and the rest the
    held-out split; no crop location appears twice.  ``specs`` is sampled
    uniformly per patch, or drawn from the default family when ``None``.
    """
    if not source_images:
        raise ValidationError("no source images")
    for i, img in enumerate(source_images):
        if img.shape[0] < patch_size or img.shape[1] < patch_size:
            raise ValidationError(f"source image {i} of size {img.shape[:2]} is smaller than patch {patch_size}")
    rng = np.random.default_rng(seed)
    total = n_train + n_val
    capacity = sum((im.shape[0] - patch_size + 1) * (im.shape[1] - patch_size + 1) for im in source_images)
    if total > capacity:
        raise ValidationError(f"cannot draw {total} distinct patches from the source images")
    seen: set[tuple[int, int, int]] = set()
    pairs: list[Pair] = []
    while len(pairs) < total:
        src = int(rng.integers(len(source_images)))
        img = source_images[src]
        x = int(rng.integers(img.shape[0] - patch_size + 1))
        y = int(rng.integers(img.shape[1] - patch_size + 1))
        if (src, x, y) in seen:
            continue
        seen.add((src, x, y))
        sharp = np.ascontiguousarray(img[x:x + patch_size, y:y + patch_size, :3], dtype=np.float64)
        spec = specs[int(rng.integers(len(specs)))] if specs else sample_blur_spec(rng)
        pairs.append(Pair(synth_blur(sharp, spec), sharp, spec, src, (x, y), f"patch{len(pairs):03d}"))
    return Dataset(pairs[:n_train], pairs[n_train:])


BUILTIN_NAMES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry")


def builtin_images() -> list[np.ndarray]:
    """Natural RGB test photographs bundled with scikit-image, as ``(W, H, 3)`` in [0, 1]."""
    from skimage import data

    out = []
    for name in BUILTIN_NAMES:
        img = getattr(data, name)()[..., :3].astype(np.float64) / 255.0
        out.append(np.ascontiguousarray(img.transpose(1, 0, 2)))
    return out
