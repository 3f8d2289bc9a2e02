"""From probability maps to 3D instance labels.

Connected components, an exact Euclidean distance transform, peak detection,
center-heatmap rendering and a marker-driven priority-flood watershed.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .errors import ConfigError, MarkerError

MODES = ("none", "marker-watershed", "distance-watershed")


@dataclass(frozen=True)
class PostprocConfig:
    mode: str = "none"
    peak_threshold: float = 0.3
    min_distance: int = 5
    sigma: float = 2.0
    connectivity: int = 26
    prob_threshold: float = 0.5
    # distance mode: maxima whose saddle to a higher neighbour is this shallow are merged
    min_dynamic: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown post-processing mode {self.mode!r}")
        if not 0 < self.peak_threshold < 1 or not 0 < self.prob_threshold < 1:
            raise ConfigError("thresholds must lie in (0, 1)")
        if self.min_distance < 1:
            raise ConfigError("min_distance must be >= 1")
        if self.min_dynamic < 0:
            raise ConfigError("min_dynamic must be >= 0")
        if self.connectivity not in (6, 18, 26, 4, 8):
            raise ConfigError(f"unsupported connectivity {self.connectivity}")


@dataclass
class Markers:
    coords: np.ndarray  # (n, ndim) int
    labels: np.ndarray  # (n,) int, distinct and >= 1

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_list(cls, items, ndim: int = 3) -> "Markers":
        """From ``[(z, y, x, label), ...]``."""
        arr = np.asarray(list(items), dtype=np.int64).reshape(-1, ndim + 1)
        return cls(arr[:, :ndim].copy(), arr[:, ndim].copy())

    def as_list(self) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in c) + (int(l),) for c, l in zip(self.coords, self.labels)]


def structure_for(ndim: int, connectivity: int) -> np.ndarray:
    rank = {6: 1, 18: 2, 26: 3, 4: 1, 8: 2}[connectivity]
    if ndim == 2 and connectivity in (6, 18, 26):
        rank = min(rank, 2)
    return ndimage.generate_binary_structure(ndim, min(rank, ndim))


def connected_components(binary: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Label maximal connected foreground regions 1..n in first-voxel scan order."""
    mask = np.asarray(binary, dtype=bool)
    labels, n = ndimage.label(mask, structure=structure_for(mask.ndim, connectivity))
    out = np.zeros(mask.shape, dtype=np.uint32)
    if n == 0:
        return out
    flat = labels.ravel()
    present, first = np.unique(flat, return_index=True)
    keep = present != 0
    present, first = present[keep], first[keep]
    remap = np.zeros(n + 1, dtype=np.uint32)
    remap[present[np.argsort(first)]] = np.arange(1, len(present) + 1, dtype=np.uint32)
    return remap[labels]


# ---------------------------------------------------------------------------
# exact Euclidean distance transform (lower envelope of parabolas, per axis)

@numba.njit(cache=True)
def _lower_envelope_rows(f):
    """In place: f[r, q] <- min_p f[r, p] + (q - p)^2 for every row r."""
    rows, n = f.shape
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    d = np.empty(n, dtype=np.float64)
    for r in range(rows):
        k = 0
        v[0] = 0
        z[0] = -np.inf
        z[1] = np.inf
        for q in range(1, n):
            while True:
                p = v[k]
                s = ((f[r, q] + q * q) - (f[r, p] + p * p)) / (2.0 * q - 2.0 * p)
                if s <= z[k] and k > 0:
                    k -= 1
                    continue
                if s <= z[k]:
                    # k == 0 and the new parabola dominates everywhere
                    v[0] = q
                    z[0] = -np.inf
                    z[1] = np.inf
                    break
                k += 1
                v[k] = q
                z[k] = s
                z[k + 1] = np.inf
                break
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            p = v[k]
            d[q] = (q - p) * (q - p) + f[r, p]
        for q in range(n):
            f[r, q] = d[q]


_BIG = 1e20


def edt_sq(binary: np.ndarray) -> np.ndarray:
    """Squared distance of each foreground voxel to the nearest background voxel.

    Everything outside the array counts as background; background maps to 0.
    """
    mask = np.asarray(binary, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    f = np.where(padded, _BIG, 0.0)
    for axis in range(f.ndim):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        shape = moved.shape
        rows = moved.reshape(-1, shape[-1])
        _lower_envelope_rows(rows)
        f = np.moveaxis(rows.reshape(shape), -1, axis)
    inner = tuple(slice(1, -1) for _ in range(mask.ndim))
    return np.ascontiguousarray(f[inner])


def edt(binary: np.ndarray) -> np.ndarray:
    return np.sqrt(edt_sq(binary))


# ---------------------------------------------------------------------------
# peaks and heatmaps

def local_maxima(field: np.ndarray, min_distance: int = 5, threshold: float = 0.3,
                 mask: np.ndarray | None = None) -> Markers:
    """Peaks at or above ``threshold`` that dominate their Chebyshev ball.

    Conflicting peaks within ``min_distance`` of each other are resolved in
    favour of the higher value, then the lower scan index. Surviving peaks
    are labelled 1..n in that priority order.
    """
    fld = np.asarray(field, dtype=np.float64)
    size = 2 * min_distance + 1
    dominant = ndimage.maximum_filter(fld, size=size, mode="constant", cval=-np.inf)
    cand = (fld >= threshold) & (fld >= dominant)
    if mask is not None:
        cand &= np.asarray(mask, dtype=bool)
    flat_idx = np.flatnonzero(cand)
    if flat_idx.size == 0:
        return Markers(np.zeros((0, fld.ndim), dtype=np.int64), np.zeros(0, dtype=np.int64))
    order = np.lexsort((flat_idx, -fld.ravel()[flat_idx]))
    blocked = np.zeros(fld.shape, dtype=bool)
    kept = []
    for i in flat_idx[order]:
        c = np.unravel_index(i, fld.shape)
        if blocked[c]:
            continue
        kept.append(c)
        blocked[tuple(slice(max(0, x - min_distance), x + min_distance + 1) for x in c)] = True
    coords = np.array(kept, dtype=np.int64).reshape(-1, fld.ndim)
    return Markers(coords, np.arange(1, len(kept) + 1, dtype=np.int64))


def render_center_heatmap(labels: np.ndarray, sigma: float = 2.0) -> np.ndarray:
    """Per-slice Gaussian (peak 1) at each cell's rounded in-slice centroid, max over cells."""
    lab = np.asarray(labels)
    Z, H, W = lab.shape
    out = np.zeros((Z, H, W), dtype=np.float32)
    ys, xs = np.arange(H), np.arange(W)
    for z in range(Z):
        sl = lab[z]
        ids = np.unique(sl)
        ids = ids[ids != 0]
        if ids.size == 0:
            continue
        centers = ndimage.center_of_mass(np.ones_like(sl, dtype=np.float64), sl, ids)
        for cy, cx in centers:
            cy, cx = int(np.floor(cy + 0.5)), int(np.floor(cx + 0.5))
            gy = np.exp(-((ys - cy) ** 2) / (2 * sigma * sigma))
            gx = np.exp(-((xs - cx) ** 2) / (2 * sigma * sigma))
            np.maximum(out[z], np.outer(gy, gx).astype(np.float32), out=out[z])
    return out


# ---------------------------------------------------------------------------
# watershed

def _neighbor_offsets(shape: tuple[int, ...], connectivity: int) -> np.ndarray:
    struct = structure_for(len(shape), connectivity)
    center = np.array(struct.shape) // 2
    strides = np.cumprod((1,) + shape[::-1][:-1])[::-1]
    offs = []
    for d in np.argwhere(struct):
        delta = d - center
        if delta.any():
            offs.append(int((delta * strides).sum()))
    return np.array(offs, dtype=np.int64)


@numba.njit(cache=True)
def _flood(priority, allowed, out, seed_idx, seed_lab, offsets):
    heap = [(0.0, np.int64(0), np.int64(0), np.int64(0))]
    heap.pop()
    counter = 0
    for i in range(seed_idx.shape[0]):
        heapq.heappush(heap, (priority[seed_idx[i]], np.int64(counter), seed_idx[i], seed_lab[i]))
        counter += 1
    while len(heap) > 0:
        _, _, idx, lab = heapq.heappop(heap)
        if out[idx] != 0:
            continue
        out[idx] = lab
        for o in offsets:
            n = idx + o
            if allowed[n] and out[n] == 0:
                heapq.heappush(heap, (priority[n], np.int64(counter), n, lab))
                counter += 1


def watershed(mask: np.ndarray, markers: Markers, priority: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Priority flood from ``markers`` inside ``mask``.

    Voxels are claimed in ascending ``priority`` (FIFO among equals, seeds in
    scan order). Foreground not reachable from any marker gets fresh labels
    above the largest marker label, by connected components.
    """
    m = np.asarray(mask, dtype=bool)
    pr = np.asarray(priority, dtype=np.float64)
    if pr.shape != m.shape:
        raise MarkerError(f"priority shape {pr.shape} != mask shape {m.shape}")
    labels = np.asarray(markers.labels, dtype=np.int64)
    if len(labels) and (labels.min() < 1 or len(np.unique(labels)) != len(labels)):
        raise MarkerError("marker labels must be distinct and >= 1")
    for c in markers.coords:
        if any(x < 0 or x >= n for x, n in zip(c, m.shape)) or not m[tuple(c)]:
            raise MarkerError(f"marker {tuple(int(x) for x in c)} lies outside the foreground mask")

    padded_mask = np.pad(m, 1, constant_values=False)
    padded_pr = np.pad(pr, 1).ravel()
    shape = padded_mask.shape
    out = np.zeros(padded_mask.size, dtype=np.int64)
    if len(labels):
        seed_idx = np.ravel_multi_index(tuple((markers.coords + 1).T), shape).astype(np.int64)
        order = np.argsort(seed_idx, kind="stable")
        _flood(padded_pr, padded_mask.ravel(), out, seed_idx[order], labels[order],
               _neighbor_offsets(shape, connectivity))
    inner = tuple(slice(1, -1) for _ in range(m.ndim))
    result = out.reshape(shape)[inner].astype(np.uint32)

    rest = m & (result == 0)
    if rest.any():
        start = int(labels.max()) if len(labels) else 0
        fresh = connected_components(rest, connectivity)
        result[rest] = fresh[rest] + start
    return result


# ---------------------------------------------------------------------------
# pipeline

def _one_marker_per_region(markers: Markers, field: np.ndarray, threshold: float, connectivity: int) -> Markers:
    """Keep the strongest marker of each connected region of ``field >= threshold``."""
    regions = connected_components(field >= threshold, connectivity)
    seen = set()
    keep = []
    for i, c in enumerate(markers.coords):
        r = int(regions[tuple(c)])
        if r in seen:
            continue
        seen.add(r)
        keep.append(i)
    coords = markers.coords[keep]
    return Markers(coords, np.arange(1, len(keep) + 1, dtype=np.int64))


def _merge_shallow_maxima(mask: np.ndarray, markers: Markers, height: np.ndarray, h: float,
                          connectivity: int) -> Markers:
    """Drop maxima separated from a higher one by a saddle less than ``h`` deep.

    A trial flood assigns every voxel to a maximum; neighbouring basins are then
    merged in descending order of their pass height while the pass lies within
    ``h`` of the lower basin's peak. The highest marker of each group survives.
    """
    if len(markers) < 2:
        return markers
    basins = watershed(mask, markers, -height, connectivity).astype(np.int64)
    n = int(basins.max()) + 1
    peak = np.zeros(n)
    peak[markers.labels] = height[tuple(markers.coords.T)]
    struct = structure_for(mask.ndim, connectivity)
    center = np.array(struct.shape) // 2
    passes = {}
    for d in np.argwhere(struct):
        off = d - center
        # each neighbour pair once: the first nonzero component is positive
        nz = off[off != 0]
        if nz.size == 0 or nz[0] < 0:
            continue
        a_sl = tuple(slice(max(0, -o), s - max(0, o)) for o, s in zip(off, mask.shape))
        b_sl = tuple(slice(max(0, o), s - max(0, -o)) for o, s in zip(off, mask.shape))
        la, lb = basins[a_sl], basins[b_sl]
        sel = (la > 0) & (lb > 0) & (la != lb)
        if not sel.any():
            continue
        lo = np.minimum(la[sel], lb[sel])
        hi = np.maximum(la[sel], lb[sel])
        height_pass = np.minimum(height[a_sl][sel], height[b_sl][sel])
        keys = lo * n + hi
        order = np.argsort(keys, kind="stable")
        keys, height_pass = keys[order], height_pass[order]
        uniq, start = np.unique(keys, return_index=True)
        best = np.maximum.reduceat(height_pass, start)
        for k, v in zip(uniq.tolist(), best.tolist()):
            if v > passes.get(k, -np.inf):
                passes[k] = v

    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for key, v in sorted(passes.items(), key=lambda kv: (-kv[1], kv[0])):
        ra, rb = find(key // n), find(key % n)
        if ra == rb or v < min(peak[ra], peak[rb]) - h:
            continue
        # the root keeps the higher peak (ties: lower label)
        if (peak[rb], -rb) > (peak[ra], -ra):
            ra, rb = rb, ra
        parent[rb] = ra
    keep = [i for i, lab in enumerate(markers.labels) if find(int(lab)) == int(lab)]
    return Markers(markers.coords[keep], np.arange(1, len(keep) + 1, dtype=np.int64))


def instances_from_masks(prob: np.ndarray, config: PostprocConfig = PostprocConfig(),
                         heatmap: np.ndarray | None = None) -> np.ndarray:
    """Instance labels from a stacked probability volume."""
    binary = np.asarray(prob) > config.prob_threshold
    if config.mode == "none":
        return connected_components(binary, config.connectivity)
    dist = edt(binary)
    if config.mode == "distance-watershed":
        markers = local_maxima(dist, config.min_distance, threshold=1.0, mask=binary)
        markers = _merge_shallow_maxima(binary, markers, dist, config.min_dynamic, config.connectivity)
    else:
        if heatmap is None:
            raise ConfigError("marker-watershed needs a center heatmap")
        heat = np.asarray(heatmap, dtype=np.float64)
        if heat.shape != binary.shape:
            raise ConfigError(f"heatmap shape {heat.shape} != probability shape {binary.shape}")
        markers = local_maxima(heat, config.min_distance, config.peak_threshold, mask=binary)
        # a cell's per-slice peaks form a vertical ridge; collapse it to one seed
        markers = _one_marker_per_region(markers, heat, config.peak_threshold, config.connectivity)
    return watershed(binary, markers, -dist, config.connectivity)
