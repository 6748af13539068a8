"""Pure-NumPy patch sampling, the fallback for the compiled kernel.

The arithmetic mirrors ``_patchkern.pyx`` operation for operation (same
weight expressions, same association order, float64 throughout) so the two
backends agree to the last few ulps and tests can compare them directly.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def _bilinear_zero(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Bilinear sample with out-of-bounds neighbors contributing zero."""
    h, w = image.shape
    x0f = np.floor(sx)
    y0f = np.floor(sy)
    fx = sx - x0f
    fy = sy - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)

    def tap(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        out = np.zeros(sx.shape, dtype=np.float64)
        out[valid] = image[yy[valid], xx[valid]]
        return out

    wx0 = 1.0 - fx
    wx1 = fx
    wy0 = 1.0 - fy
    wy1 = fy
    return ((wx0 * wy0) * tap(y0, x0)
            + (wx1 * wy0) * tap(y0, x0 + 1)
            + (wx0 * wy1) * tap(y0 + 1, x0)
            + (wx1 * wy1) * tap(y0 + 1, x0 + 1))


def _resize_grid(patch_size: int, out_size: int):
    """Half-pixel-center source coordinates, clamped to the window."""
    u = (np.arange(out_size, dtype=np.float64) + 0.5) * patch_size / out_size - 0.5
    u = np.clip(u, 0.0, float(patch_size - 1))
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    i1 = np.minimum(i0 + 1, patch_size - 1)
    return i0, i1, f


def sample_patches(image: np.ndarray, centers: np.ndarray, thetas: np.ndarray,
                   patch_size: int, out_size: int) -> np.ndarray:
    """Rotated bilinear windows around each center, resized to out_size.

    Parameters
    ----------
    image : float64 array (h, w), values already scaled to [0, 1]
    centers : float64 array (n, 2) of (x, y) positions
    thetas : float64 array (n,) of window rotations in radians
    """
    image = np.ascontiguousarray(image, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    thetas = np.asarray(thetas, dtype=np.float64).reshape(-1)
    n = centers.shape[0]

    offs = np.arange(patch_size, dtype=np.float64) - (patch_size - 1) / 2.0
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    i0, i1, f = _resize_grid(patch_size, out_size)
    wy0 = (1.0 - f)[:, None]
    wy1 = f[:, None]
    wx0 = (1.0 - f)[None, :]
    wx1 = f[None, :]

    out = np.empty((n, out_size, out_size), dtype=np.float64)
    for k in range(n):
        ct = np.cos(thetas[k])
        st = np.sin(thetas[k])
        sx = centers[k, 0] + ct * ox - st * oy
        sy = centers[k, 1] + st * ox + ct * oy
        win = _bilinear_zero(image, sx, sy)
        out[k] = ((wx0 * wy0) * win[np.ix_(i0, i0)]
                  + (wx1 * wy0) * win[np.ix_(i0, i1)]
                  + (wx0 * wy1) * win[np.ix_(i1, i0)]
                  + (wx1 * wy1) * win[np.ix_(i1, i1)])
    return out
