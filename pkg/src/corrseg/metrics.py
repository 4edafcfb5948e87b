"""Panoptic quality (PQ = SQ x RQ) with things/stuff splits.

Segments are (category, instance-id) regions; stuff uses instance id 0.
A prediction matches a ground-truth segment of the same category iff their
IoU is strictly above 0.5, which makes matches unique.  Per class:

    SQ = mean IoU of matched pairs (0 if none)
    RQ = TP / (TP + FP/2 + FN/2)
    PQ = SQ * RQ

Aggregates average over classes that have at least one GT or predicted
segment.  `PqAccumulator` pools TP/FP/FN/IoU across scenes so a dataset
gets a single PQ rather than a mean of per-scene PQs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import ShapeError
from .postprocess import PanopticSegmentation

_VOID = -1


@dataclass
class ClassPq:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0

    @property
    def pq(self) -> float:
        return self.sq * self.rq


@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    pq_things: float
    pq_stuff: float
    per_class: Dict[int, ClassPq]


def _segment_areas(pan: PanopticSegmentation) -> Dict[Tuple[int, int], int]:
    pairs = np.stack([pan.category.reshape(-1), pan.instance.reshape(-1)], axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    return {
        (int(c), int(i)): int(n)
        for (c, i), n in zip(uniq, counts)
        if c != _VOID
    }


class PqAccumulator:
    """Pools match statistics over many (pred, gt) pairs."""

    def __init__(self, k_thing: int = 3) -> None:
        self.k_thing = k_thing
        self.stats: Dict[int, ClassPq] = {}

    def _cls(self, category: int) -> ClassPq:
        return self.stats.setdefault(category, ClassPq())

    def add(self, pred: PanopticSegmentation, gt: PanopticSegmentation) -> None:
        if pred.category.shape != gt.category.shape:
            raise ShapeError(
                f"prediction {pred.category.shape} does not match "
                f"ground truth {gt.category.shape}"
            )
        gt_areas = _segment_areas(gt)
        pred_areas = _segment_areas(pred)

        quad = np.stack(
            [
                gt.category.reshape(-1),
                gt.instance.reshape(-1),
                pred.category.reshape(-1),
                pred.instance.reshape(-1),
            ],
            axis=1,
        )
        uniq, counts = np.unique(quad, axis=0, return_counts=True)

        # IoU per same-category (gt segment, pred segment) pair, then sort
        # descending so floating-point sums are order-independent.
        per_class_ious: Dict[int, List[float]] = {}
        matched_gt = set()
        matched_pred = set()
        for (gc, gi, pc, pi), inter in zip(uniq, counts):
            gt_key = (int(gc), int(gi))
            pred_key = (int(pc), int(pi))
            if gt_key[0] == _VOID or pred_key[0] == _VOID:
                continue
            if gt_key[0] != pred_key[0]:
                continue
            union = gt_areas[gt_key] + pred_areas[pred_key] - int(inter)
            iou = int(inter) / union
            if iou > 0.5:
                assert gt_key not in matched_gt and pred_key not in matched_pred
                matched_gt.add(gt_key)
                matched_pred.add(pred_key)
                per_class_ious.setdefault(gt_key[0], []).append(iou)

        for category, ious in per_class_ious.items():
            cls = self._cls(category)
            cls.tp += len(ious)
            cls.iou_sum += sum(sorted(ious, reverse=True))
        for key in gt_areas:
            if key not in matched_gt:
                self._cls(key[0]).fn += 1
        for key in pred_areas:
            if key not in matched_pred:
                self._cls(key[0]).fp += 1

    def result(self) -> PQResult:
        counted = {
            c: s
            for c, s in sorted(self.stats.items())
            if s.tp + s.fp + s.fn > 0
        }

        def mean(values: List[float]) -> float:
            return sum(values) / len(values) if values else 0.0

        things = [s.pq for c, s in counted.items() if c < self.k_thing]
        stuff = [s.pq for c, s in counted.items() if c >= self.k_thing]
        return PQResult(
            pq=mean([s.pq for s in counted.values()]),
            sq=mean([s.sq for s in counted.values()]),
            rq=mean([s.rq for s in counted.values()]),
            pq_things=mean(things),
            pq_stuff=mean(stuff),
            per_class=counted,
        )


def compute_pq(
    pred: PanopticSegmentation, gt: PanopticSegmentation, k_thing: int = 3
) -> PQResult:
    acc = PqAccumulator(k_thing=k_thing)
    acc.add(pred, gt)
    return acc.result()
