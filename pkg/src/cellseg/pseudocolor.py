"""Context-aware pseudocoloring of volume slices.

Red and blue emphasise the current slice wherever a rough ROI (CLAHE, then
Otsu) was found in the previous and next slice; green is the plain slice.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError

NBINS = 256


@dataclass(frozen=True)
class PseudocolorParams:
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)

    def __post_init__(self):
        if self.clahe_clip < 1:
            raise ValueError("clahe_clip must be >= 1")
        if min(self.clahe_tiles) < 1:
            raise ValueError("clahe_tiles must be at least (1, 1)")


DEFAULT_PARAMS = PseudocolorParams()


def to_uint8_range(image: np.ndarray) -> np.ndarray:
    """Min-max rescale to integers 0..255 (assumes a non-constant image)."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    return np.rint((img - lo) / (hi - lo) * 255).astype(np.int64)


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.rint(np.linspace(0, n, tiles + 1)).astype(int)


def _tile_mapping(tile: np.ndarray, clip: float) -> np.ndarray:
    n = tile.size
    hist = np.bincount(tile.ravel(), minlength=NBINS).astype(np.float64)
    if np.isfinite(clip):
        limit = clip * n / NBINS
        excess = np.maximum(hist - limit, 0).sum()
        hist = np.minimum(hist, limit) + excess / NBINS
    cdf = np.cumsum(hist)
    cdf_min = cdf[cdf > 0].min()
    if n - cdf_min <= 1e-12:
        return np.arange(NBINS, dtype=np.float64)
    return np.rint((cdf - cdf_min) / (n - cdf_min) * 255)


def clahe(image: np.ndarray, params: PseudocolorParams = DEFAULT_PARAMS) -> np.ndarray:
    """Contrast limited adaptive histogram equalisation of a 2D slice.

    The slice is rescaled to 0..255, each tile gets a clipped-histogram
    equalisation map, and every pixel blends the maps of the four nearest
    tile centres bilinearly. A constant slice is returned unchanged.
    """
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise DimensionError(f"clahe expects a non-empty 2D slice, got shape {img.shape}")
    if img.min() == img.max():
        return img.copy()
    v = to_uint8_range(img)
    H, W = v.shape
    ty, tx = min(params.clahe_tiles[0], H), min(params.clahe_tiles[1], W)
    ey, ex = _tile_edges(H, ty), _tile_edges(W, tx)
    maps = np.empty((ty, tx, NBINS))
    for i in range(ty):
        for j in range(tx):
            maps[i, j] = _tile_mapping(v[ey[i]:ey[i + 1], ex[j]:ex[j + 1]], params.clahe_clip)

    def blend_coords(n, edges, tiles):
        centers = (edges[:-1] + edges[1:] - 1) / 2.0
        pos = np.arange(n, dtype=np.float64)
        idx = np.searchsorted(centers, pos, side="right") - 1
        i0 = np.clip(idx, 0, tiles - 1)
        i1 = np.clip(idx + 1, 0, tiles - 1)
        span = np.where(i1 > i0, centers[i1] - centers[i0], 1.0)
        f = np.where(i1 > i0, (pos - centers[i0]) / span, 0.0)
        return i0, i1, np.clip(f, 0.0, 1.0)

    y0, y1, fy = blend_coords(H, ey, ty)
    x0, x1, fx = blend_coords(W, ex, tx)
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    FY, FX = np.meshgrid(fy, fx, indexing="ij")
    top = (1 - FX) * maps[Y0, X0, v] + FX * maps[Y0, X1, v]
    bottom = (1 - FX) * maps[Y1, X0, v] + FX * maps[Y1, X1, v]
    out = (1 - FY) * top + FY * bottom
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


class OtsuResult(NamedTuple):
    threshold: int
    degenerate: bool


def otsu_threshold(image: np.ndarray) -> OtsuResult:
    """Threshold t maximising between-class variance of (v <= t) vs (v > t).

    Ties go to the lowest t. A constant image yields its own value and is
    flagged degenerate (the ROI mask ``v > t`` is then empty).
    """
    vals = np.asarray(image)
    if vals.min() == vals.max():
        return OtsuResult(int(vals.flat[0]), True)
    v = np.clip(np.rint(vals), 0, 255).astype(np.int64).ravel()
    hist = np.bincount(v, minlength=NBINS).astype(np.float64)
    total = hist.sum()
    levels = np.arange(NBINS, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    s0 = np.cumsum(hist * levels)
    s1 = s0[-1] - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = np.where((w0 > 0) & (w1 > 0),
                           w0 * w1 * (s0 / w0 - s1 / w1) ** 2 / (total * total), 0.0)
    # tolerance so float noise cannot break ties away from the lowest threshold
    best = between.max()
    t = int(np.flatnonzero(between >= best - 1e-9 * max(best, 1.0))[0])
    return OtsuResult(t, False)


def roi_mask(image: np.ndarray, params: PseudocolorParams = DEFAULT_PARAMS) -> np.ndarray:
    """Rough cell mask of a slice: CLAHE followed by Otsu thresholding."""
    eq = clahe(image, params)
    res = otsu_threshold(eq)
    if res.degenerate:
        return np.zeros(eq.shape, dtype=np.uint8)
    return (eq > res.threshold).astype(np.uint8)


def mac_highlight(current: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Multiply-accumulate: ``current + mask * current``."""
    cur = np.asarray(current, dtype=np.float64)
    m = np.asarray(mask)
    if cur.shape != m.shape:
        raise DimensionError(f"slice {cur.shape} and mask {m.shape} differ in shape")
    return cur + m * cur


def _normalize_joint(stack: np.ndarray) -> np.ndarray:
    lo, hi = stack.min(), stack.max()
    if hi == lo:
        return np.zeros_like(stack, dtype=np.float32)
    return ((stack - lo) / (hi - lo)).astype(np.float32)


def pseudocolor_channels(volume: np.ndarray, z: int, params: PseudocolorParams = DEFAULT_PARAMS) -> np.ndarray:
    """Un-normalised (red, green, blue) stack for slice ``z``."""
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise DimensionError(f"expected a (Z, Y, X) volume, got {vol.shape}")
    Z = vol.shape[0]
    if not 0 <= z < Z:
        raise IndexError(f"slice {z} out of range for {Z} slices")
    cur = vol[z].astype(np.float64)
    # boundary slices use themselves as the missing neighbour
    prev_mask = roi_mask(vol[max(z - 1, 0)], params)
    next_mask = roi_mask(vol[min(z + 1, Z - 1)], params)
    return np.stack([mac_highlight(cur, prev_mask), cur, mac_highlight(cur, next_mask)])


def pseudocolor_slice(volume: np.ndarray, z: int, params: PseudocolorParams = DEFAULT_PARAMS) -> np.ndarray:
    """(3, H, W) float32 image in [0, 1], channels R, G, B."""
    return _normalize_joint(pseudocolor_channels(volume, z, params))


def gray_replicate_slice(volume: np.ndarray, z: int) -> np.ndarray:
    """Three identical copies of the min-max normalised slice."""
    vol = np.asarray(volume)
    if not 0 <= z < vol.shape[0]:
        raise IndexError(f"slice {z} out of range for {vol.shape[0]} slices")
    cur = vol[z].astype(np.float64)
    return _normalize_joint(np.stack([cur, cur, cur]))


def pseudocolor_volume(volume: np.ndarray, params: PseudocolorParams = DEFAULT_PARAMS,
                       mode: str = "pseudocolor") -> np.ndarray:
    """Per-slice network inputs for a whole volume, shape (Z, 3, Y, X)."""
    vol = np.asarray(volume)
    if mode == "pseudocolor":
        masks = [roi_mask(vol[z], params) for z in range(vol.shape[0])]
        out = []
        Z = vol.shape[0]
        for z in range(Z):
            cur = vol[z].astype(np.float64)
            stack = np.stack([mac_highlight(cur, masks[max(z - 1, 0)]), cur,
                              mac_highlight(cur, masks[min(z + 1, Z - 1)])])
            out.append(_normalize_joint(stack))
        return np.stack(out)
    if mode == "gray-replicate":
        return np.stack([gray_replicate_slice(vol, z) for z in range(vol.shape[0])])
    raise ValueError(f"unknown input mode {mode!r}")
