"""Instance de-duplication and panoptic fusion.

Matrix NMS rescales scores in one shot instead of dropping masks: each
mask's score is multiplied by a gaussian decay driven by its worst overlap
with any higher-scored mask of the same category, compensated by how much
that suppressor is itself suppressed.  Fusion then paints kept instances
in score order onto an empty canvas, fills the rest from the semantic
argmax, and voids out tiny stuff regions and leftover thing-class pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import InstancePrediction, ModelConfig


@dataclass
class PanopticSegmentation:
    """Per-pixel category (-1 for void) and instance id (0 for stuff/void)."""

    category: np.ndarray
    instance: np.ndarray

    def __post_init__(self) -> None:
        if self.category.shape != self.instance.shape:
            raise ShapeError(
                f"category {self.category.shape} does not match "
                f"instance {self.instance.shape}"
            )

    @property
    def height(self) -> int:
        return self.category.shape[0]

    @property
    def width(self) -> int:
        return self.category.shape[1]


def matrix_nms(pred: InstancePrediction, sigma: float = 2.0) -> InstancePrediction:
    """Return predictions sorted by incoming score with decayed scores.

    decay_j = min_i exp(-(iou_ij^2 - cmax_i^2) / sigma) over higher-scored
    masks i of the same category, where cmax_i is the worst overlap i has
    with anything above it.  Scores never increase.
    """
    n = len(pred)
    if n == 0:
        return InstancePrediction(masks=[], categories=[], scores=[])

    order = np.argsort(-np.asarray(pred.scores), kind="stable")
    masks = [pred.masks[i] for i in order]
    cats = np.asarray([pred.categories[i] for i in order])
    scores = np.asarray([pred.scores[i] for i in order], dtype=float)

    flat = np.stack([(m > 0.5).reshape(-1).astype(float) for m in masks])
    inter = flat @ flat.T
    areas = np.diag(inter)
    union = areas[:, None] + areas[None, :] - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)

    same_class = cats[:, None] == cats[None, :]
    pair = np.triu(np.where(same_class, iou, 0.0), k=1)
    cmax = pair.max(axis=0)
    active = np.triu(same_class, k=1)
    decay_pairs = np.where(
        active, np.exp(-(pair**2 - cmax[:, None] ** 2) / sigma), 1.0
    )
    decay = decay_pairs.min(axis=0)

    return InstancePrediction(
        masks=masks,
        categories=[int(c) for c in cats],
        scores=[float(s) for s in scores * decay],
    )


def fuse_panoptic(
    pred: InstancePrediction, semantic: np.ndarray, cfg: ModelConfig
) -> PanopticSegmentation:
    """Combine instance masks and a semantic argmax map into one labeling."""
    if semantic.ndim != 2:
        raise ShapeError(f"semantic map must be 2D, got {semantic.shape}")
    h, w = semantic.shape
    category = np.full((h, w), -1, dtype=np.int64)
    instance = np.zeros((h, w), dtype=np.int64)
    claimed = np.zeros((h, w), dtype=bool)

    keep = [i for i in range(len(pred)) if pred.scores[i] > cfg.post_nms_score]
    keep.sort(key=lambda i: (-pred.scores[i], i))

    next_id = 0
    for i in keep:
        mask = pred.masks[i]
        if mask.shape != (h, w):
            raise ShapeError(
                f"mask {mask.shape} does not match semantic map {(h, w)}"
            )
        claim = (mask > 0.5) & ~claimed
        if not claim.any():
            continue
        next_id += 1
        category[claim] = pred.categories[i]
        instance[claim] = next_id
        claimed |= claim

    unclaimed = ~claimed
    stuff = unclaimed & (semantic >= cfg.k_thing)
    category[stuff] = semantic[stuff]
    # thing-class pixels no instance claimed stay void (-1)

    min_area = cfg.stuff_min_area * h * w
    for cls in range(cfg.k_thing, cfg.k_thing + cfg.k_stuff):
        region = category == cls
        if 0 < region.sum() < min_area:
            category[region] = -1

    return PanopticSegmentation(category=category, instance=instance)
