"""Synthetic two-domain image classification data.

Each class is a procedural glyph (an oriented bar or a disk) drawn with
per-sample jitter into a sub-region of the canvas, so a patch grid over the
image always contains both glyph patches and background patches. The target
domain applies a configurable covariate shift on top of the same renderer.

Images are float32 in [0, 1], channel-first (N, C, H, W). Generation is
fully determined by the seed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as _ndimage

from .tensor import FormatError

MAGIC = b"PMDS"
VERSION = 1


@dataclass(frozen=True)
class ShiftSpec:
    """Covariate shift applied to the target domain."""

    intensity_invert: bool = False
    background_gradient_amp: float = 0.0
    noise_std: float = 0.0
    rotation_degrees: float = 0.0

    def is_neutral(self) -> bool:
        return (not self.intensity_invert
                and self.background_gradient_amp == 0.0
                and self.noise_std == 0.0
                and self.rotation_degrees == 0.0)


DEFAULT_SHIFT = ShiftSpec(intensity_invert=True, background_gradient_amp=0.5,
                          noise_std=0.1, rotation_degrees=0.0)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    n_classes: int
    seed: int
    shift: ShiftSpec

    def __len__(self) -> int:
        return self.images.shape[0]


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    # counts differ by at most one across classes
    base = n // n_classes
    counts = np.full(n_classes, base, dtype=np.int64)
    counts[: n % n_classes] += 1
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), counts)
    rng.shuffle(labels)
    return labels


def _render_glyph(cls: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """One glyph image on a dark background; glyph stays inside a centered box."""
    img = np.full((size, size), 0.1, dtype=np.float64)
    fg = 0.85 + rng.uniform(-0.08, 0.08)
    cy = size / 2 + rng.uniform(-3.0, 3.0)
    cx = size / 2 + rng.uniform(-3.0, 3.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    half = rng.uniform(7.0, 9.0)      # bar half-length
    thick = rng.uniform(1.4, 2.2)     # bar half-thickness
    if cls == 0:    # horizontal bar
        mask = (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= half)
    elif cls == 1:  # vertical bar
        mask = (np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= half)
    elif cls == 2:  # diagonal bar
        u = (xx - cx + yy - cy) / np.sqrt(2.0)
        v = (xx - cx - yy + cy) / np.sqrt(2.0)
        mask = (np.abs(v) <= thick) & (np.abs(u) <= half)
    elif cls == 3:  # disk
        r = rng.uniform(4.5, 6.0)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:           # ring, for configs with more than four classes
        r = rng.uniform(5.0, 7.0)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (d2 <= r * r) & (d2 >= (r - 2.5) ** 2)
    img[mask] = fg
    img += rng.normal(0.0, 0.02, size=(size, size))
    return img


def _apply_shift(img: np.ndarray, shift: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    if shift.rotation_degrees != 0.0:
        img = _ndimage.rotate(img, shift.rotation_degrees, reshape=False,
                              order=1, mode="nearest")
    if shift.intensity_invert:
        img = 1.0 - img
    if shift.background_gradient_amp != 0.0:
        size = img.shape[-1]
        ramp = np.linspace(-0.5, 0.5, size, dtype=np.float64)
        img = img + shift.background_gradient_amp * ramp[None, :]
    if shift.noise_std > 0.0:
        img = img + rng.normal(0.0, shift.noise_std, size=img.shape)
    return img


def _generate_domain(n: int, n_classes: int, size: int, shift: ShiftSpec,
                     seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, n_classes, rng)
    images = np.empty((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        img = _render_glyph(int(labels[i]), rng, size)
        img = _apply_shift(img, shift, rng)
        images[i, 0] = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Dataset(images=images, labels=labels, n_classes=n_classes,
                   seed=seed, shift=shift)


def generate_pair(n_classes: int, n_per_domain: int, shift: ShiftSpec,
                  seed: int, image_size: int = 32) -> tuple[Dataset, Dataset]:
    """Source (neutral) and target (shifted) datasets from one seed."""
    if n_classes < 2 or n_classes > 5:
        raise ValueError(f"n_classes must be in [2, 5], got {n_classes}")
    if n_per_domain < n_classes:
        raise ValueError("need at least one sample per class")
    source = _generate_domain(n_per_domain, n_classes, image_size,
                              ShiftSpec(), seed * 2 + 1)
    target = _generate_domain(n_per_domain, n_classes, image_size,
                              shift, seed * 2 + 2)
    return source, target


# ---------------------------------------------------------------------------
# binary dataset file
#
# magic "PMDS", version u32, n u32, n_classes u32, height u32, width u32,
# channels u32, seed u64, shift as 4 little-endian f32 (gradient amp, noise
# std, rotation degrees, reserved 0) plus one u8 invert flag, then image
# payload as little-endian f32 and labels as u16.

_HEADER = struct.Struct("<4sIIIIIIQffffB")


def save_dataset(ds: Dataset, path: str) -> None:
    n, c, h, w = ds.images.shape
    header = _HEADER.pack(MAGIC, VERSION, n, ds.n_classes, h, w, c,
                          ds.seed, ds.shift.background_gradient_amp,
                          ds.shift.noise_std, ds.shift.rotation_degrees, 0.0,
                          1 if ds.shift.intensity_invert else 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ds.images.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} bytes at offset 0")
    (magic, version, n, n_classes, h, w, c, seed,
     grad_amp, noise_std, rot_deg, _reserved, invert) = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    img_bytes = n * c * h * w * 4
    lbl_bytes = n * 2
    expect = _HEADER.size + img_bytes + lbl_bytes
    if len(raw) != expect:
        raise FormatError(
            f"payload size mismatch: have {len(raw)} bytes, need {expect} "
            f"(truncation near offset {len(raw)})")
    images = np.frombuffer(raw, dtype="<f4", count=n * c * h * w,
                           offset=_HEADER.size).reshape(n, c, h, w).copy()
    labels = np.frombuffer(raw, dtype="<u2", count=n,
                           offset=_HEADER.size + img_bytes).astype(np.int64)
    shift = ShiftSpec(intensity_invert=bool(invert),
                      background_gradient_amp=float(np.float32(grad_amp)),
                      noise_std=float(np.float32(noise_std)),
                      rotation_degrees=float(np.float32(rot_deg)))
    return Dataset(images=images, labels=labels, n_classes=n_classes,
                   seed=seed, shift=shift)


def file_digest(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()
