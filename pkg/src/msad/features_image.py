"""Handcrafted patch features for RGB and infrared images.

Each grid cell yields per-channel mean and standard deviation followed by an
8-bin, magnitude-weighted gradient-orientation histogram of the luminance, for a
dimension of ``2 * channels + 8``. Deep features computed elsewhere can be
imported through the MSFT format instead (see :mod:`msad.ingest`).
"""

from __future__ import annotations

import numpy as np

from .core import Modality, PatchFeatureMap

WORKING_RESOLUTION = 224
DEFAULT_GRID = (28, 28)
N_ORIENTATION_BINS = 8

_REC601 = np.array([0.299, 0.587, 0.114])


def to_luminance(image: np.ndarray) -> np.ndarray:
    """Rec.601 luma. Single-channel input is returned unchanged.

    uint8 input gives uint8 output rounded half up; float input stays float.
    """
    if image.ndim == 2:
        return image
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected 1 or 3 channels, got shape {image.shape}")
    y = image.astype(np.float64) @ _REC601
    if np.issubdtype(image.dtype, np.integer):
        return np.clip(np.floor(y + 0.5), 0, 255).astype(image.dtype)
    return y


def resize_bilinear(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``(height, width)`` with pixel-centre alignment and edge clamping.

    Integer images are rounded half up (``floor(x + 0.5)``); a 2x2 {0, 255}
    checkerboard shrunk to 1x1 therefore gives 128.
    """
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError("target size must be >= 1")
    h, w = image.shape[:2]
    if (th, tw) == (h, w):
        return image.copy()
    src = image.astype(np.float64)

    def coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        i0 = np.floor(x).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    y0, y1, fy = coords(th, h)
    x0, x1, fx = coords(tw, w)
    if src.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        return np.clip(np.floor(out + 0.5), info.min, info.max).astype(image.dtype)
    return out


def _grid_edges(n: int, parts: int) -> np.ndarray:
    return (np.arange(parts + 1) * n) // parts


def _gradient_histograms(lum: np.ndarray) -> np.ndarray:
    """Per-pixel orientation-binned gradient magnitudes, shape (H, W, 8)."""
    padded = np.pad(lum, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    angle = np.arctan2(gy, gx)
    # bins centred on multiples of 45 degrees; bin 0 is the +x direction
    width = 2 * np.pi / N_ORIENTATION_BINS
    idx = np.floor((angle + width / 2) / width).astype(np.intp) % N_ORIENTATION_BINS
    out = np.zeros(lum.shape + (N_ORIENTATION_BINS,))
    np.put_along_axis(out, idx[..., None], mag[..., None], axis=2)
    return out


def _patch_reduce(arr: np.ndarray, rows: int, cols: int, fn) -> np.ndarray:
    """Apply ``fn`` over each grid cell of an (H, W, C) array -> (rows*cols, C)."""
    h, w = arr.shape[:2]
    ye, xe = _grid_edges(h, rows), _grid_edges(w, cols)
    if h % rows == 0 and w % cols == 0:
        ph, pw = h // rows, w // cols
        blocks = arr.reshape(rows, ph, cols, pw, -1).transpose(0, 2, 1, 3, 4)
        return fn(blocks.reshape(rows * cols, ph * pw, -1), axis=1)
    out = np.empty((rows * cols, arr.shape[2]))
    for r in range(rows):
        for c in range(cols):
            cell = arr[ye[r] : ye[r + 1], xe[c] : xe[c + 1]].reshape(-1, arr.shape[2])
            out[r * cols + c] = fn(cell, axis=0)
    return out


def extract_patch_features(
    image: np.ndarray,
    grid: tuple[int, int] = DEFAULT_GRID,
    modality: Modality | None = None,
    resolution: int = WORKING_RESOLUTION,
) -> PatchFeatureMap:
    """Grid of handcrafted patch features for one image.

    The image is resized to ``resolution x resolution`` first. Rows of the
    result follow the grid in row-major order.
    """
    if image.size == 0:
        raise ValueError("empty image")
    rows, cols = int(grid[0]), int(grid[1])
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be >= 1")
    if rows > resolution or cols > resolution:
        raise ValueError(f"grid {rows}x{cols} larger than working resolution {resolution}")
    if modality is None:
        modality = Modality.RGB if image.ndim == 3 else Modality.INFRARED
    img = resize_bilinear(image.astype(np.float64), (resolution, resolution))
    if img.ndim == 2:
        img = img[:, :, None]
    lum = to_luminance(img if img.shape[2] == 3 else img[:, :, 0])
    mean = _patch_reduce(img, rows, cols, np.mean)
    std = _patch_reduce(img, rows, cols, np.std)
    hist = _patch_reduce(_gradient_histograms(lum), rows, cols, np.mean)
    feats = np.concatenate([mean, std, hist], axis=1)
    return PatchFeatureMap(modality, feats, (rows, cols))
