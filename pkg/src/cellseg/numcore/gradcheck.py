"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


def finite_difference(loss_fn: Callable[[], float], array: np.ndarray, indices: Iterable[tuple],
                      h: float = 1e-3) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. selected entries of ``array``.

    ``array`` is perturbed in place and restored; ``loss_fn`` must read it on
    every call. Pass float64 arrays to get a double-precision recompute.
    """
    out = []
    for idx in indices:
        orig = array[idx]
        array[idx] = orig + h
        plus = float(loss_fn())
        array[idx] = orig - h
        minus = float(loss_fn())
        array[idx] = orig
        out.append((plus - minus) / (2 * h))
    return np.array(out)


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max over entries of ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def sample_indices(shape: tuple[int, ...], count: int, rng: np.random.Generator) -> list[tuple]:
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(int(i), shape) for i in sorted(flat)]
