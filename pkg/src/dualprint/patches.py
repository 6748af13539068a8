"""Foreground ROI detection and orientation-normalized patch extraction.

Patch sampling runs through one of two interchangeable kernels: a compiled
extension (``dualprint._patchkern``) when it was built, otherwise a pure
NumPy fallback.  Selection happens at import time and can be forced with
``DUALPRINT_PATCH_BACKEND=cython|numpy``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _patch_numpy
from .data import FingerprintImage, Minutia
from .errors import BlankImageError, ConfigError, DataError

PATCH_SIZE = 96
PATCH_OUT_SIZE = 224
ROI_BLOCK_SIZE = 16
ROI_VARIANCE_THRESHOLD = 25.0

_ENV_VAR = "DUALPRINT_PATCH_BACKEND"


def _select_backend():
    try:
        from . import _patchkern
    except ImportError:
        _patchkern = None
    forced = os.environ.get(_ENV_VAR, "").strip().lower()
    if forced == "numpy":
        return _patch_numpy
    if forced == "cython":
        if _patchkern is None:
            raise ConfigError(
                f"{_ENV_VAR}=cython but the compiled kernel is not available")
        return _patchkern
    if forced:
        raise ConfigError(f"{_ENV_VAR} must be 'cython' or 'numpy', got {forced!r}")
    return _patchkern if _patchkern is not None else _patch_numpy


_BACKEND = _select_backend()


def active_backend() -> str:
    """Name of the kernel in use: 'cython' or 'numpy'."""
    return _BACKEND.BACKEND_NAME


@dataclass(frozen=True)
class RoiBox:
    """Half-open pixel box [x0, x1) x [y0, y1) around the foreground."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def crop(self, pixels: np.ndarray) -> np.ndarray:
        return pixels[self.y0:self.y1, self.x0:self.x1]


def _as_pixels(image) -> np.ndarray:
    if isinstance(image, FingerprintImage):
        return image.pixels
    return np.asarray(image)


def block_variance(pixels: np.ndarray, block_size: int = ROI_BLOCK_SIZE) -> np.ndarray:
    """Per-block intensity variance on a ceil grid (edge blocks may be short)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = pixels.shape
    nby = -(-h // block_size)
    nbx = -(-w // block_size)
    out = np.empty((nby, nbx), dtype=np.float64)
    for by in range(nby):
        for bx in range(nbx):
            blk = pixels[by * block_size:min((by + 1) * block_size, h),
                         bx * block_size:min((bx + 1) * block_size, w)]
            out[by, bx] = blk.var()
    return out


def extract_roi(image, block_size: int = ROI_BLOCK_SIZE,
                variance_threshold: float = ROI_VARIANCE_THRESHOLD
                ) -> tuple[RoiBox, np.ndarray]:
    """Foreground box plus the cropped raster.

    The box is the tightest cover of every block whose intensity variance
    exceeds the threshold.  Minutiae must be shifted into the crop frame by
    the caller (see data.shift_minutiae).  Raises BlankImageError when no
    block passes, i.e. the image carries no ridge structure to work with.
    """
    pixels = _as_pixels(image)
    if pixels.ndim != 2 or pixels.size == 0:
        raise BlankImageError("ROI detection needs a non-empty 2-D image")
    var = block_variance(pixels, block_size)
    active = np.argwhere(var > variance_threshold)
    if active.size == 0:
        raise BlankImageError(
            f"no foreground: all {var.size} blocks have variance <= {variance_threshold}")
    h, w = pixels.shape
    y0 = int(active[:, 0].min()) * block_size
    x0 = int(active[:, 1].min()) * block_size
    y1 = min((int(active[:, 0].max()) + 1) * block_size, h)
    x1 = min((int(active[:, 1].max()) + 1) * block_size, w)
    box = RoiBox(x0, y0, x1, y1)
    return box, box.crop(pixels)


@dataclass(frozen=True)
class Patch:
    """One orientation-normalized window with its provenance."""

    pixels: np.ndarray
    source_minutia: Minutia
    source_image_id: tuple


def _image_id(image) -> tuple:
    if isinstance(image, FingerprintImage):
        return (image.finger_id, image.impression_id, image.liveness)
    return ()


def extract_patch_stack(image, minutiae: list[Minutia],
                        patch_size: int = PATCH_SIZE,
                        out_size: int = PATCH_OUT_SIZE) -> np.ndarray:
    """Patch rasters for every minutia as one (n, out, out) float32 array.

    Each patch is a patch_size x patch_size window centered on the minutia,
    rotated by -theta so the minutia direction maps onto the patch +x axis,
    bilinearly sampled (zero outside the image), then bilinearly resized to
    out_size.  Values are intensities in [0, 1].
    """
    if patch_size < 2 or out_size < 2:
        raise ConfigError("patch_size and out_size must be >= 2")
    pixels = _as_pixels(image)
    if pixels.ndim != 2 or pixels.size == 0:
        raise ConfigError("patch extraction needs a non-empty 2-D image")
    if not minutiae:
        raise DataError("cannot extract patches: empty minutiae list")
    scaled = np.asarray(pixels, dtype=np.float64) / 255.0
    centers = np.array([[m.x, m.y] for m in minutiae], dtype=np.float64)
    thetas = np.array([m.theta for m in minutiae], dtype=np.float64)
    raw = _BACKEND.sample_patches(scaled, centers, thetas, patch_size, out_size)
    return np.asarray(raw, dtype=np.float32)


def select_by_quality(minutiae: list[Minutia], cap: int | None) -> list[Minutia]:
    """The cap highest-quality minutiae, kept in their original order."""
    if cap is None or cap >= len(minutiae):
        return list(minutiae)
    if cap < 1:
        raise ConfigError("minutiae cap must be >= 1")
    order = np.argsort([-m.quality for m in minutiae], kind="stable")[:cap]
    return [minutiae[i] for i in sorted(int(i) for i in order)]


def extract_all_patches(image, minutiae: list[Minutia], cap: int | None = None,
                        patch_size: int = PATCH_SIZE,
                        out_size: int = PATCH_OUT_SIZE) -> list[Patch]:
    """One Patch per minutia, in input order; optional quality cap."""
    kept = select_by_quality(minutiae, cap)
    stack = extract_patch_stack(image, kept, patch_size, out_size)
    image_id = _image_id(image)
    return [Patch(stack[i], m, image_id) for i, m in enumerate(kept)]


def extract_patch(image, minutia: Minutia, patch_size: int = PATCH_SIZE,
                  out_size: int = PATCH_OUT_SIZE) -> np.ndarray:
    """Single-minutia patch raster, (out, out) float32 in [0, 1]."""
    return extract_patch_stack(image, [minutia], patch_size, out_size)[0]
