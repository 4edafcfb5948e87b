"""Training loop and scene-level evaluation helpers.

Plain SGD (momentum 0.9, weight decay 1e-4) over scenes in a fixed order,
one scene per step.  A non-finite loss aborts with NumericsError so the
caller keeps the last finished epoch's checkpoint.  Evaluation runs one
forward pass per scene and feeds both heads through NMS, fusion, and the
PQ accumulator.
"""

from __future__ import annotations

import math
from typing import Iterable, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor
from .errors import NumericsError
from .losses import total_loss
from .metrics import PqAccumulator, PQResult
from .model import (
    STRIDE,
    InstancePrediction,
    ModelConfig,
    PanopticModel,
    decode_instances,
    upsample_nearest,
)
from .postprocess import PanopticSegmentation, fuse_panoptic, matrix_nms
from .synth import SyntheticScene

MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4
MAX_GRAD_NORM = 5.0


def make_optimizer(model: PanopticModel, lr: float) -> SGD:
    return SGD(model.parameters(), lr=lr, momentum=MOMENTUM,
               weight_decay=WEIGHT_DECAY)


def clip_gradients(params, max_norm: float = MAX_GRAD_NORM) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Per-scene steps occasionally spike; without the cap a single bad step
    can saturate the heads and stall the rest of the run.
    """
    total = 0.0
    grads = [p.grad for p in params.values() if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def scene_image(scene: SyntheticScene) -> Tensor:
    return Tensor(scene.image)


def flip_scene(scene: SyntheticScene, horizontal: bool, vertical: bool) -> SyntheticScene:
    """Mirror a scene; flips leave the band/shape structure valid."""
    if not horizontal and not vertical:
        return scene
    sel_y = slice(None, None, -1) if vertical else slice(None)
    sel_x = slice(None, None, -1) if horizontal else slice(None)
    return SyntheticScene(
        image=scene.image[sel_y, sel_x].copy(),
        semantic=scene.semantic[sel_y, sel_x].copy(),
        instances=[(m[sel_y, sel_x].copy(), c) for m, c in scene.instances],
        meta=dict(scene.meta),
    )


def scene_to_panoptic(scene: SyntheticScene) -> PanopticSegmentation:
    """Ground-truth labeling: instance ids 1..n in scene order, stuff id 0."""
    instance = np.zeros((scene.height, scene.width), dtype=np.int64)
    for k, (mask, _) in enumerate(scene.instances):
        instance[mask] = k + 1
    return PanopticSegmentation(category=scene.semantic.copy(), instance=instance)


def train_epoch(
    model: PanopticModel,
    optimizer: SGD,
    scenes: Iterable[SyntheticScene],
    augment_rng=None,
    skip_above: Optional[float] = None,
) -> float:
    """One pass over the scenes; returns the mean loss.

    With an ``augment_rng`` each scene is independently mirrored left-right
    and top-bottom with probability 1/2, a cheap way to stretch a small
    fixed dataset without touching its labels.

    ``skip_above`` rejects outlier steps: a scene whose loss exceeds it
    still counts toward the epoch mean, but its update is dropped.  Norm
    clipping alone bounds each step, not a burst of them; one pathological
    scene can otherwise kick the weights into a saturated basin that the
    rest of the run never escapes.
    """
    losses: List[float] = []
    for scene in scenes:
        if augment_rng is not None:
            scene = flip_scene(scene,
                               horizontal=augment_rng.next_double() < 0.5,
                               vertical=augment_rng.next_double() < 0.5)
        outputs = model.forward(scene_image(scene))
        loss = total_loss(outputs, scene, model.cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericsError(f"non-finite loss {value!r} during training")
        losses.append(value)
        if skip_above is not None and value > skip_above:
            continue
        optimizer.zero_grad()
        loss.backward()
        clip_gradients(optimizer.params)
        optimizer.step()
    if not losses:
        raise ValueError("no scenes to train on")
    return float(np.mean(losses))


def spike_threshold(prev_mean: Optional[float], factor: float = 10.0
                    ) -> Optional[float]:
    """Loss level above which a step should be rejected, given the
    previous epoch's mean; None for the first epoch (nothing to compare
    against, and an untrained model is uniformly mediocre anyway)."""
    if prev_mean is None:
        return None
    return factor * prev_mean


def infer_panoptic(
    model: PanopticModel, scene: SyntheticScene
) -> Tuple[PanopticSegmentation, InstancePrediction]:
    """One forward pass -> (fused panoptic labeling, post-NMS instances)."""
    cfg = model.cfg
    with ad.no_grad():
        features = model.backbone(scene_image(scene))
        sem_logits = model.semantic_logits(features)
        cate_logits, mask_logits = model.instance_maps(features)
    pred = decode_instances(cate_logits.data, mask_logits.data, cfg)
    pred = matrix_nms(pred, sigma=cfg.nms_sigma)
    semantic = upsample_nearest(np.argmax(sem_logits.data, axis=-1), STRIDE)
    return fuse_panoptic(pred, semantic, cfg), pred


def evaluate_scenes(
    model: PanopticModel, scenes: Iterable[SyntheticScene]
) -> PQResult:
    acc = PqAccumulator(k_thing=model.cfg.k_thing)
    for scene in scenes:
        fused, _ = infer_panoptic(model, scene)
        acc.add(fused, scene_to_panoptic(scene))
    return acc.result()


def twins_covered(
    pred: InstancePrediction, scene: SyntheticScene, score_threshold: float
) -> bool:
    """True when every ground-truth twin mask is covered by some kept
    prediction at IoU > 0.5, regardless of the predicted class."""
    if scene.meta.get("twin_mode") != "1":
        raise ValueError("scene was not generated in twin mode")
    if len(scene.instances) < 2 or scene.instances[0][1] != scene.instances[1][1]:
        raise ValueError("twin scene is missing its twin pair")
    kept = [
        pred.masks[i] > 0.5
        for i in range(len(pred))
        if pred.scores[i] > score_threshold
    ]
    for gt_mask, _ in scene.instances[:2]:
        gt_area = gt_mask.sum()
        found = False
        for mask in kept:
            inter = (mask & gt_mask).sum()
            union = mask.sum() + gt_area - inter
            if union > 0 and inter / union > 0.5:
                found = True
                break
        if not found:
            return False
    return True


def twins_detected(model: PanopticModel, scene: SyntheticScene) -> bool:
    _, pred = infer_panoptic(model, scene)
    return twins_covered(pred, scene, model.cfg.post_nms_score)


def twin_detection_rate(
    model: PanopticModel, scenes: Iterable[SyntheticScene]
) -> float:
    flags = [twins_detected(model, s) for s in scenes]
    if not flags:
        return 0.0
    return sum(flags) / len(flags)
