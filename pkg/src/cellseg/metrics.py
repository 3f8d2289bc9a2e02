"""Evaluation metrics: MeanIoU, the object-based SEG score and PESEG."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, DomainError, EmptyReferenceError


@dataclass(frozen=True)
class ConfusionCounts:
    """Voxel counts per class, index 0 = background, 1 = cell."""
    tp: tuple[int, int]
    fp: tuple[int, int]
    fn: tuple[int, int]

    @classmethod
    def from_masks(cls, pred: np.ndarray, ref: np.ndarray) -> "ConfusionCounts":
        p = np.asarray(pred).astype(bool)
        r = np.asarray(ref).astype(bool)
        if p.shape != r.shape:
            raise DimensionError(f"prediction {p.shape} and reference {r.shape} differ in shape")
        both = int(np.count_nonzero(p & r))
        only_p = int(np.count_nonzero(p & ~r))
        only_r = int(np.count_nonzero(~p & r))
        neither = p.size - both - only_p - only_r
        return cls(tp=(neither, both), fp=(only_r, only_p), fn=(only_p, only_r))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(*(tuple(a + b for a, b in zip(x, y))
                                 for x, y in ((self.tp, other.tp), (self.fp, other.fp), (self.fn, other.fn))))

    def class_iou(self) -> list[float]:
        out = []
        for tp, fp, fn in zip(self.tp, self.fp, self.fn):
            denom = tp + fp + fn
            # a class absent from both prediction and reference scores 1
            out.append(1.0 if denom == 0 else tp / denom)
        return out

    def mean_iou(self) -> float:
        ious = self.class_iou()
        return sum(ious) / len(ious)


def mean_iou(pred: np.ndarray, ref: np.ndarray) -> float:
    return ConfusionCounts.from_masks(pred, ref).mean_iou()


def seg_terms(ref: np.ndarray, pred: np.ndarray) -> list[float]:
    """Matched Jaccard index of every reference object, in ascending label order.

    A reference object R is matched by the predicted object S covering strictly
    more than half of it; otherwise its term is 0.
    """
    r = np.asarray(ref).ravel().astype(np.int64)
    s = np.asarray(pred).ravel().astype(np.int64)
    if r.shape != s.shape:
        raise DimensionError(f"reference {np.shape(ref)} and prediction {np.shape(pred)} differ in shape")
    ref_ids, r_inv = np.unique(r, return_inverse=True)
    pred_ids, s_inv = np.unique(s, return_inverse=True)
    ref_size = np.bincount(r_inv, minlength=len(ref_ids))
    pred_size = np.bincount(s_inv, minlength=len(pred_ids))
    pair = r_inv * len(pred_ids) + s_inv
    pair_ids, inter = np.unique(pair, return_counts=True)
    ri, si = np.divmod(pair_ids, len(pred_ids))

    best = {}
    for a, b, n in zip(ri, si, inter):
        if ref_ids[a] == 0 or pred_ids[b] == 0:
            continue
        if n > 0.5 * ref_size[a]:
            best[a] = int(n) / int(ref_size[a] + pred_size[b] - n)
    return [best.get(a, 0.0) for a in range(len(ref_ids)) if ref_ids[a] != 0]


def seg_score(ref: np.ndarray, pred: np.ndarray) -> float:
    """Mean matched Jaccard index over the reference objects of one volume."""
    terms = seg_terms(ref, pred)
    if not terms:
        raise EmptyReferenceError("SEG is undefined for a reference without objects")
    return sum(terms) / len(terms)


def pooled_seg(pairs) -> float:
    """SEG over several (ref, pred) volumes: mean over all reference objects pooled."""
    terms: list[float] = []
    for ref, pred in pairs:
        terms.extend(seg_terms(ref, pred))
    if not terms:
        raise EmptyReferenceError("SEG is undefined: no reference objects in any volume")
    return sum(terms) / len(terms)


def peseg(seg: float, n_params: int) -> float:
    """SEG per million parameters."""
    if n_params <= 0:
        raise DomainError(f"parameter count must be positive, got {n_params}")
    return seg / n_params * 1e6


@dataclass
class MetricReport:
    mean_iou: float | None
    seg: float | None
    peseg: float | None
    n_params: int | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)
