"""Volume files, synthetic cell volumes, resizing and sliding-window tiling.

RVF layout: one JSON header line ``{"dtype":..,"shape":[Z,Y,X],"order":"ZYX"}``
followed by the raw little-endian voxel payload.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, PlacementError, PlanError

RVF_DTYPES = {"u8": "<u1", "u16": "<u2", "f32": "<f4", "u32": "<u4"}
_DTYPE_NAMES = {np.dtype(v).newbyteorder("="): k for k, v in RVF_DTYPES.items()}


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rvf_bytes(volume: np.ndarray) -> bytes:
    vol = np.asarray(volume)
    if vol.ndim != 3 or min(vol.shape) < 1:
        raise DimensionError(f"RVF volumes are non-empty 3D arrays, got shape {vol.shape}")
    name = _DTYPE_NAMES.get(vol.dtype.newbyteorder("="))
    if name is None:
        raise FormatError(f"unsupported dtype {vol.dtype}; expected one of {sorted(RVF_DTYPES)}")
    header = json.dumps({"dtype": name, "shape": list(vol.shape), "order": "ZYX"}, separators=(",", ":"))
    return header.encode() + b"\n" + np.ascontiguousarray(vol, dtype=RVF_DTYPES[name]).tobytes()


def write_rvf(volume: np.ndarray, path) -> None:
    _atomic_write(path, rvf_bytes(volume))


def parse_rvf(data: bytes, source: str = "<bytes>") -> np.ndarray:
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{source}: missing RVF header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: header is not valid JSON") from exc
    if not isinstance(header, dict) or header.get("order") != "ZYX":
        raise FormatError(f"{source}: header must be an object with order ZYX")
    dtype = header.get("dtype")
    if dtype not in RVF_DTYPES:
        raise FormatError(f"{source}: unknown dtype {dtype!r}")
    shape = header.get("shape")
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape)):
        raise FormatError(f"{source}: shape must be three positive integers, got {shape!r}")
    payload = data[nl + 1:]
    itemsize = np.dtype(RVF_DTYPES[dtype]).itemsize
    expected = math.prod(shape) * itemsize
    if len(payload) != expected:
        raise FormatError(f"{source}: payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=RVF_DTYPES[dtype]).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("="))


def read_rvf(path) -> np.ndarray:
    return parse_rvf(Path(path).read_bytes(), str(path))


def ppm_bytes(image: np.ndarray) -> bytes:
    """Binary PPM (P6, maxval 255) from a (3, H, W) float image in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    rgb = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def write_ppm(image: np.ndarray, path) -> None:
    _atomic_write(path, ppm_bytes(image))


def read_ppm(path) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm`; returns uint8 (3, H, W)."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported")
    pixels = data[-(w * h * 3):]
    if len(pixels) != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# synthetic volumes

@dataclass
class SynthParams:
    shape: tuple[int, int, int] = (8, 96, 96)
    cells: int = 3
    # (z, y, x) semi-axis ranges in voxels
    semi_axes_min: tuple[float, float, float] = (2.0, 9.0, 9.0)
    semi_axes_max: tuple[float, float, float] = (3.5, 16.0, 16.0)
    peak_range: tuple[float, float] = (0.6, 1.0)
    falloff: float = 1.0
    noise: float = 0.05
    seed: int = 0
    touching: bool = False
    max_attempts: int = 2000

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise DimensionError(f"shape must be three positive sizes, got {self.shape}")
        if self.cells < 0:
            raise ValueError("cell count must be >= 0")
        for lo, hi, n in zip(self.semi_axes_min, self.semi_axes_max, self.shape):
            if not 0 < lo <= hi or 2 * hi > n:
                raise DimensionError(f"semi-axis range ({lo}, {hi}) does not fit an axis of {n} voxels")


def _ellipsoid(shape, center, axes):
    """Normalised squared radius r^2 over the bounding box of an ellipsoid."""
    lo = [max(0, int(math.floor(c - a))) for c, a in zip(center, axes)]
    hi = [min(n, int(math.ceil(c + a)) + 1) for n, c, a in zip(shape, center, axes)]
    grids = np.meshgrid(*[np.arange(l, h) for l, h in zip(lo, hi)], indexing="ij")
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, axes))
    return tuple(slice(l, h) for l, h in zip(lo, hi)), r2


def _draw_cell(rng, p: SynthParams):
    axes = [rng.uniform(lo, hi) for lo, hi in zip(p.semi_axes_min, p.semi_axes_max)]
    center = [rng.uniform(a - 0.5, n - a - 0.5) for a, n in zip(axes, p.shape)]
    return center, axes


def gen_synthetic(params: SynthParams) -> tuple[np.ndarray, np.ndarray]:
    """Seeded volume of non-touching ellipsoidal cells with z-decreasing visibility.

    Cell voxels have intensity ``peak * (1 - r^2) ** falloff``; Gaussian noise is
    added and the result clamped to [0, 1]. With ``touching`` exactly two
    equal cells are placed side by side along x so their voxel sets touch.
    """
    p = params
    rng = np.random.default_rng(p.seed)
    clean = np.zeros(p.shape, dtype=np.float64)
    labels = np.zeros(p.shape, dtype=np.uint32)
    if p.touching:
        # integer x semi-axis and centres 2a-1 apart: the voxel sets touch but never share a voxel
        axes = [float(p.semi_axes_max[0]), float(p.semi_axes_max[1]), float(math.floor(p.semi_axes_max[2]))]
        a = int(axes[2])
        if p.shape[2] < 4 * a - 2:
            raise DimensionError("volume too narrow for a touching pair")
        zc, yc = (p.shape[0] - 1) / 2, (p.shape[1] - 1) / 2
        x0 = a - 1 + (p.shape[2] - (4 * a - 2)) // 2
        peak = float(np.mean(p.peak_range))
        for label, xc in enumerate((x0, x0 + 2 * a - 1), start=1):
            _paint(clean, labels, [zc, yc, xc], axes, peak, p.falloff, label)
    else:
        placed = 0
        attempts = 0
        occupied = np.zeros(p.shape, dtype=bool)
        while placed < p.cells:
            if attempts >= p.max_attempts:
                raise PlacementError(placed, p.cells)
            attempts += 1
            center, axes = _draw_cell(rng, p)
            sl, r2 = _ellipsoid(p.shape, center, axes)
            inside = r2 < 1
            if not inside.any() or occupied[sl][inside].any():
                continue
            peak = rng.uniform(*p.peak_range)
            _paint(clean, labels, center, axes, peak, p.falloff, placed + 1)
            placed += 1
            occupied |= _dilate(labels == placed)
    noisy = clean + rng.normal(0.0, p.noise, size=p.shape) if p.noise > 0 else clean
    return np.clip(noisy, 0.0, 1.0).astype(np.float32), labels


def _dilate(mask: np.ndarray) -> np.ndarray:
    from scipy.ndimage import binary_dilation
    return binary_dilation(mask, structure=np.ones((3, 3, 3), dtype=bool))


def _paint(clean, labels, center, axes, peak, falloff, label):
    sl, r2 = _ellipsoid(clean.shape, center, axes)
    inside = r2 < 1
    region = clean[sl]
    region[inside] = np.maximum(region[inside], peak * (1 - r2[inside]) ** falloff)
    lab = labels[sl]
    lab[inside & (lab == 0)] = label


# ---------------------------------------------------------------------------
# resizing

def _resize_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a 2D image."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(image, dtype=np.float64)
    if img.shape == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _resize_weights(img.shape[0], out_h)
    x0, x1, fx = _resize_weights(img.shape[1], out_w)
    rows = img[y0] * (1 - fy)[:, None] + img[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx)[None, :] + rows[:, x1] * fx[None, :]


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target size must be positive, got {out_h}x{out_w}")
    lab = np.asarray(labels)
    h, w = lab.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return lab[ys][:, xs]


# ---------------------------------------------------------------------------
# tiling

@dataclass
class TilePlan:
    height: int
    width: int
    patch: int
    origins: list[tuple[int, int]] = field(default_factory=list)
    stride: tuple[int, int] = (0, 0)
    overlap: tuple[int, int] = (0, 0)

    @property
    def grid(self) -> tuple[int, int]:
        ys = sorted({o[0] for o in self.origins})
        xs = sorted({o[1] for o in self.origins})
        return len(ys), len(xs)


def _axis_origins(length: int, patch: int, max_stride: int) -> list[int]:
    if length == patch:
        return [0]
    n = math.ceil((length - patch) / max_stride) + 1
    return [round(i * (length - patch) / (n - 1)) for i in range(n)]


def tile_plan(height: int, width: int, patch: int, min_overlap: int = 0) -> TilePlan:
    """Smallest grid of square windows covering the image with at least ``min_overlap`` overlap."""
    if patch > height or patch > width:
        raise PlanError(f"patch {patch} larger than image {height}x{width}")
    if patch < 1 or not 0 <= min_overlap < patch:
        raise PlanError(f"need 0 <= min_overlap < patch, got {min_overlap} and {patch}")
    max_stride = patch - min_overlap
    ys = _axis_origins(height, patch, max_stride)
    xs = _axis_origins(width, patch, max_stride)

    def step(origins):
        return max((b - a for a, b in zip(origins, origins[1:])), default=0)

    sy, sx = step(ys), step(xs)
    return TilePlan(height, width, patch, [(y, x) for y in ys for x in xs],
                    stride=(sy, sx), overlap=(patch - sy if sy else 0, patch - sx if sx else 0))


def extract_windows(image: np.ndarray, plan: TilePlan) -> list[np.ndarray]:
    P = plan.patch
    return [image[..., y:y + P, x:x + P] for y, x in plan.origins]


def stitch(plan: TilePlan, windows) -> np.ndarray:
    """Average per-window predictions where windows overlap."""
    windows = list(windows)
    if len(windows) != len(plan.origins):
        raise PlanError(f"{len(windows)} windows for a plan of {len(plan.origins)}")
    P = plan.patch
    total = np.zeros((plan.height, plan.width), dtype=np.float64)
    count = np.zeros((plan.height, plan.width), dtype=np.float64)
    for (y, x), win in zip(plan.origins, windows):
        if win.shape != (P, P):
            raise DimensionError(f"window shape {win.shape} != ({P}, {P})")
        total[y:y + P, x:x + P] += win
        count[y:y + P, x:x + P] += 1
    return total / count
