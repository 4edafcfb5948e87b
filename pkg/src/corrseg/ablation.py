"""Variant sweep over instance/semantic enhancement choices.

Six variants share one dataset and training schedule:

    baseline   no enhancement on either branch
    scm        semantic branch enhanced
    icm        instance branch enhanced
    scm_icm    both branches enhanced
    coords     instance branch gets coordinate channels + linear mix
    sinusoid   instance branch gets additive fixed sinusoidal embeddings

`coords` and `sinusoid` swap in alternative positional encoders with the
same duck type as the production instance encoder, so the rest of the
model is untouched.  The report CSV has one row per variant with PQ
aggregates and the training wall time.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericsError
from .model import ModelConfig, PanopticModel
from .rng import SplitMix64
from .synth import SceneConfig, SyntheticScene, generate_scene
from .train import (
    evaluate_scenes,
    make_optimizer,
    spike_threshold,
    train_epoch,
    twin_detection_rate,
)

VARIANTS = ("baseline", "scm", "icm", "scm_icm", "coords", "sinusoid")

CSV_HEADER = ("variant", "pq", "sq", "rq", "pq_th", "pq_st", "twin_rate",
              "train_seconds")

LR_DECAY_FACTOR = 0.3
LR_DECAY_POINT = 0.75


class CoordsEncoder:
    """Concatenate normalized (x, y) channels, then mix back linearly.

    The mix is a bias-free 1x1 projection, the same combination rule the
    correlation encoder uses, so the only difference under test is the
    positional signal itself.
    """

    def __init__(self, channels: int, rng: SplitMix64):
        self.proj = ad.init_parameter(
            (1, 1, channels + 2, channels), channels + 2, rng
        )

    def encode(self, features: Tensor) -> Tensor:
        h, w = features.shape[0], features.shape[1]
        xs = np.broadcast_to((np.arange(w) + 0.5) * (2.0 / w) - 1.0, (h, w))
        ys = np.broadcast_to(((np.arange(h) + 0.5) * (2.0 / h) - 1.0)[:, None], (h, w))
        coords = Tensor(np.stack([xs, ys], axis=-1))
        return ad.conv2d(ad.concat([features, coords], axis=-1), self.proj)

    def parameters(self, prefix: str = "coords") -> Dict[str, Tensor]:
        return {f"{prefix}_proj": self.proj}


class SinusoidEncoder:
    """Add fixed sin/cos positional embeddings; no learned parameters.

    Channel 4k holds sin of x at frequency pi*2^k/W, 4k+1 the matching
    cos, 4k+2 and 4k+3 the same for y; channels past the last full group
    stay zero.
    """

    def __init__(self, channels: int):
        self.channels = channels

    def encode(self, features: Tensor) -> Tensor:
        h, w = features.shape[0], features.shape[1]
        if features.shape[2] != self.channels:
            raise ValueError(
                f"encoder built for {self.channels} channels, "
                f"got {features.shape[2]}"
            )
        emb = np.zeros((h, w, self.channels))
        xs = np.broadcast_to(np.arange(w, dtype=float), (h, w))
        ys = np.broadcast_to(np.arange(h, dtype=float)[:, None], (h, w))
        for k in range(self.channels // 4):
            fx = math.pi * (2.0**k) / w
            fy = math.pi * (2.0**k) / h
            emb[..., 4 * k] = np.sin(fx * xs)
            emb[..., 4 * k + 1] = np.cos(fx * xs)
            emb[..., 4 * k + 2] = np.sin(fy * ys)
            emb[..., 4 * k + 3] = np.cos(fy * ys)
        return features + Tensor(emb)

    def parameters(self, prefix: str = "sinusoid") -> Dict[str, Tensor]:
        return {}


def make_variant_model(
    variant: str, base_cfg: ModelConfig, seed: int
) -> PanopticModel:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    cfg = replace(
        base_cfg,
        use_scm=variant in ("scm", "scm_icm"),
        use_icm=variant in ("icm", "scm_icm"),
    )
    rng = SplitMix64(seed)
    encoder = None
    if variant == "coords":
        encoder = CoordsEncoder(cfg.channels, rng)
    elif variant == "sinusoid":
        encoder = SinusoidEncoder(cfg.channels)
    return PanopticModel(cfg, rng, instance_encoder=encoder)


def make_twin_dataset(
    n_scenes: int, seed: int, scene_cfg: Optional[SceneConfig] = None
) -> List[SyntheticScene]:
    """Twin scenes from consecutive seeds, skipping rare placement failures.

    Every returned scene really contains both twins, so downstream
    detection-rate checks never see a degenerate scene.
    """
    base = scene_cfg or SceneConfig(twin_mode=True, min_things=2, max_things=2)
    scenes: List[SyntheticScene] = []
    offset = 0
    while len(scenes) < n_scenes:
        scene = generate_scene(replace(base, twin_mode=True, seed=seed + offset))
        offset += 1
        if len(scene.instances) >= 2:
            scenes.append(scene)
    return scenes


def run_ablation(
    scenes: Sequence[SyntheticScene],
    base_cfg: ModelConfig,
    epochs: int,
    lr: float,
    seed: int = 0,
    train_fraction: float = 0.8,
    out_path=None,
    variants: Sequence[str] = VARIANTS,
    progress=None,
) -> List[Dict[str, object]]:
    """Train and evaluate each variant; returns one result dict per row.

    Every variant gets the same schedule: SGD at ``lr`` with the rate
    dropped by LR_DECAY_FACTOR after LR_DECAY_POINT of the epochs, and
    per-scene flip augmentation.  The augmentation stream is re-seeded
    identically for each variant so they all train on the exact same
    sequence of augmented scenes; the comparison then isolates the
    architecture.  A variant whose training hits a non-finite loss is
    recorded as a row of NaNs and the sweep continues.
    """
    split = int(len(scenes) * train_fraction)
    train_scenes = list(scenes[:split])
    held_out = list(scenes[split:])
    if not train_scenes or not held_out:
        raise ValueError(
            f"need a non-trivial split, got {len(train_scenes)} train / "
            f"{len(held_out)} held-out"
        )

    decay_epoch = int(epochs * LR_DECAY_POINT)
    rows: List[Dict[str, object]] = []
    for variant in variants:
        model = make_variant_model(variant, base_cfg, seed)
        optimizer = make_optimizer(model, lr)
        augment_rng = SplitMix64(seed + 1)
        start = time.perf_counter()
        prev_mean = None
        try:
            for epoch in range(epochs):
                if epoch == decay_epoch:
                    optimizer.lr = lr * LR_DECAY_FACTOR
                mean_loss = train_epoch(model, optimizer, train_scenes,
                                        augment_rng=augment_rng,
                                        skip_above=spike_threshold(prev_mean))
                prev_mean = mean_loss
                if progress is not None:
                    progress(variant, epoch, mean_loss)
            elapsed = time.perf_counter() - start
            result = evaluate_scenes(model, held_out)
            twin_rate = twin_detection_rate(model, held_out)
            rows.append({
                "variant": variant,
                "pq": result.pq,
                "sq": result.sq,
                "rq": result.rq,
                "pq_th": result.pq_things,
                "pq_st": result.pq_stuff,
                "train_seconds": elapsed,
                "twin_rate": twin_rate,
            })
        except NumericsError:
            elapsed = time.perf_counter() - start
            rows.append({
                "variant": variant,
                "pq": float("nan"),
                "sq": float("nan"),
                "rq": float("nan"),
                "pq_th": float("nan"),
                "pq_st": float("nan"),
                "train_seconds": elapsed,
                "twin_rate": float("nan"),
            })

    if out_path is not None:
        write_report(out_path, rows)
    return rows


def write_report(path, rows: List[Dict[str, object]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(
                [row["variant"]]
                + [f"{float(row[key]):.4f}" for key in CSV_HEADER[1:]]
            )
