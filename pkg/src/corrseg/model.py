"""Toy one-stage panoptic model.

A two-stage strided backbone maps an (H, W, 3) image to (H/4, W/4, C)
features.  The semantic branch (optionally enhanced by the semantic
correlation module) stacks four 3x3 convolutions and emits per-pixel
class logits.  The instance branch (optionally enhanced by the instance
correlation module or a comparator positional encoder) follows the
dynamic-kernel grid design: a G-by-G grid of cells, each predicting
per-class scores and a 1x1 kernel that is applied to a shared mask
feature map.

All learned state lives in plain Tensor dataclass fields so the
parameter dict is flat, checkpointable, and order-stable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import icm as icm_mod
from . import scm as scm_mod
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .rng import SplitMix64

STRIDE = 4  # backbone downsampling factor

# Category-head bias prior: sigmoid(-4.59) is about 0.01, so an untrained
# model scores every cell-class pair below the pre-NMS threshold and
# predicts no instances.
CATE_BIAS_INIT = -4.59


@dataclass
class ModelConfig:
    n_fourier: int = 3
    s_ref: int = 4
    lambda_sem: float = 0.5
    channels: int = 16
    grid_size: int = 4
    k_thing: int = 3
    k_stuff: int = 3
    pre_nms_score: float = 0.1
    post_nms_score: float = 0.3
    stuff_min_area: float = 4096.0 / (640.0 * 640.0)
    nms_sigma: float = 2.0
    use_scm: bool = False
    use_icm: bool = False
    scm_mode: str = "axial"

    def __post_init__(self):
        if self.n_fourier < 0:
            raise ConfigError(f"n_fourier must be >= 0, got {self.n_fourier}")
        if self.s_ref < 1:
            raise ConfigError(f"s_ref must be >= 1, got {self.s_ref}")
        if self.grid_size < 1:
            raise ConfigError(f"grid_size must be >= 1, got {self.grid_size}")
        if self.lambda_sem < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_sem}")
        if self.channels < 1 or self.k_thing < 1 or self.k_stuff < 0:
            raise ConfigError("channels and category counts must be positive")
        for name in ("pre_nms_score", "post_nms_score", "stuff_min_area"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.scm_mode not in ("global", "axial"):
            raise ConfigError(f"scm_mode must be global or axial, got {self.scm_mode!r}")

    @property
    def k_total(self) -> int:
        return self.k_thing + self.k_stuff


@dataclass
class InstancePrediction:
    masks: List[np.ndarray]
    categories: List[int]
    scores: List[float]

    def __post_init__(self):
        if not (len(self.masks) == len(self.categories) == len(self.scores)):
            raise ShapeError(
                f"prediction list lengths differ: {len(self.masks)} masks, "
                f"{len(self.categories)} categories, {len(self.scores)} scores"
            )

    def __len__(self) -> int:
        return len(self.masks)


@dataclass
class ModelOutputs:
    sem_logits: Tensor   # (Hf, Wf, K_total)
    cate_logits: Tensor  # (G, G, K_thing)
    mask_logits: Tensor  # (G*G, Hf, Wf)


class IcmEncoder:
    """Production instance-branch enhancer backed by the ICM."""

    def __init__(self, channels: int, n_terms: int, s: int, rng: SplitMix64):
        self.s = s
        self.weights = icm_mod.IcmWeights.init(channels, n_terms, s, rng)

    def encode(self, features: Tensor) -> Tensor:
        refs = icm_mod.make_reference_grid(features.shape[0], features.shape[1], self.s)
        return icm_mod.icm_forward(features, self.weights, refs)

    def parameters(self, prefix: str = "icm") -> Dict[str, Tensor]:
        return self.weights.parameters(prefix)


def _conv_block(channels_in: int, channels_out: int, rng: SplitMix64, k: int = 3):
    kernel = ad.init_parameter((k, k, channels_in, channels_out), k * k * channels_in, rng)
    bias = ad.zeros_parameter((channels_out,))
    return kernel, bias


class PanopticModel:
    def __init__(self, cfg: ModelConfig, rng: SplitMix64,
                 instance_encoder: Optional[object] = None):
        self.cfg = cfg
        c = cfg.channels
        self.stem1, self.stem1_bias = _conv_block(3, c, rng)
        self.stem2, self.stem2_bias = _conv_block(c, c, rng)
        self.sem_convs = [_conv_block(c, c, rng) for _ in range(4)]
        self.sem_out, self.sem_out_bias = _conv_block(c, cfg.k_total, rng, k=1)
        self.mask_convs = [_conv_block(c, c, rng) for _ in range(2)]
        self.tower_conv, self.tower_bias = _conv_block(c, c, rng)
        self.cate_head, self.cate_bias = _conv_block(c, cfg.k_thing, rng, k=1)
        self.cate_bias.data[...] = CATE_BIAS_INIT
        self.kernel_head, self.kernel_bias = _conv_block(c, c, rng, k=1)
        self.scm_weights = (
            scm_mod.ScmWeights.init(c, cfg.n_fourier, rng) if cfg.use_scm else None
        )
        if instance_encoder is not None:
            self.instance_encoder = instance_encoder
        elif cfg.use_icm:
            self.instance_encoder = IcmEncoder(c, cfg.n_fourier, cfg.s_ref, rng)
        else:
            self.instance_encoder = None

    # -- parameters -----------------------------------------------------

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {
            "stem1": self.stem1, "stem1_bias": self.stem1_bias,
            "stem2": self.stem2, "stem2_bias": self.stem2_bias,
            "sem_out": self.sem_out, "sem_out_bias": self.sem_out_bias,
            "tower_conv": self.tower_conv, "tower_bias": self.tower_bias,
            "cate_head": self.cate_head, "cate_bias": self.cate_bias,
            "kernel_head": self.kernel_head, "kernel_bias": self.kernel_bias,
        }
        for i, (kernel, bias) in enumerate(self.sem_convs):
            params[f"sem_conv{i}"] = kernel
            params[f"sem_conv{i}_bias"] = bias
        for i, (kernel, bias) in enumerate(self.mask_convs):
            params[f"mask_conv{i}"] = kernel
            params[f"mask_conv{i}_bias"] = bias
        if self.scm_weights is not None:
            params.update(self.scm_weights.parameters("scm"))
        if self.instance_encoder is not None:
            params.update(self.instance_encoder.parameters())
        return params

    # -- forward pieces ---------------------------------------------------

    def backbone(self, image: Tensor) -> Tensor:
        h, w = image.shape[0], image.shape[1]
        if h % STRIDE or w % STRIDE:
            raise ShapeError(f"image dims must be divisible by {STRIDE}, got {h}x{w}")
        x = ad.relu(ad.conv2d(image, self.stem1) + self.stem1_bias)
        x = x[::2, ::2, :]
        x = ad.relu(ad.conv2d(x, self.stem2) + self.stem2_bias)
        return x[::2, ::2, :]

    def semantic_logits(self, features: Tensor) -> Tensor:
        x = features
        if self.scm_weights is not None:
            x = scm_mod.scm_forward(x, self.scm_weights, mode=self.cfg.scm_mode)
        for kernel, bias in self.sem_convs:
            x = ad.relu(ad.conv2d(x, kernel) + bias)
        return ad.conv2d(x, self.sem_out) + self.sem_out_bias

    def instance_maps(self, features: Tensor) -> Tuple[Tensor, Tensor]:
        """Category logits and mask logits from the dynamic-kernel grid."""
        cfg = self.cfg
        x = features
        if self.instance_encoder is not None:
            x = self.instance_encoder.encode(x)
        hf, wf, c = x.shape
        g = cfg.grid_size
        if hf % g or wf % g:
            raise ShapeError(
                f"feature map {hf}x{wf} not divisible by grid size {g}"
            )
        mask_feat = x
        for kernel, bias in self.mask_convs:
            mask_feat = ad.relu(ad.conv2d(mask_feat, kernel) + bias)
        tower = ad.relu(ad.conv2d(x, self.tower_conv) + self.tower_bias)
        hb, wb = hf // g, wf // g
        pooled = ad.reshape(tower, (g, hb, g, wb, c))
        pooled = ad.tsum(ad.tsum(pooled, axis=3), axis=1) * (1.0 / (hb * wb))
        cate_logits = ad.conv2d(pooled, self.cate_head) + self.cate_bias
        kernels = ad.conv2d(pooled, self.kernel_head) + self.kernel_bias
        flat_feat = ad.transpose(ad.reshape(mask_feat, (hf * wf, c)), (1, 0))
        mask_logits = ad.reshape(kernels, (g * g, c)) @ flat_feat
        return cate_logits, ad.reshape(mask_logits, (g * g, hf, wf))

    def forward(self, image: Tensor) -> ModelOutputs:
        features = self.backbone(image)
        sem_logits = self.semantic_logits(features)
        cate_logits, mask_logits = self.instance_maps(features)
        return ModelOutputs(sem_logits=sem_logits, cate_logits=cate_logits,
                            mask_logits=mask_logits)

    # -- inference -------------------------------------------------------

    def predict_instances(self, image: Tensor) -> InstancePrediction:
        """Raw per-cell predictions above the pre-NMS score threshold.

        Masks are sigmoid probabilities upsampled (bilinear) to image size,
        ordered by descending score with grid-cell index breaking ties.
        """
        with ad.no_grad():
            outputs = self.forward(image)
        return decode_instances(
            outputs.cate_logits.data, outputs.mask_logits.data, self.cfg
        )

    def semantic_map(self, image: Tensor) -> np.ndarray:
        """Per-pixel argmax class ids at image resolution."""
        with ad.no_grad():
            features = self.backbone(image)
            logits = self.semantic_logits(features)
        return upsample_nearest(np.argmax(logits.data, axis=-1), STRIDE)


def decode_instances(
    cate_logits: np.ndarray, mask_logits: np.ndarray, cfg: ModelConfig
) -> InstancePrediction:
    """Turn raw head outputs into thresholded per-cell predictions.

    Masks become sigmoid probabilities upsampled (bilinear) to image size,
    which places the later 0.5 binarization boundary between feature cells
    instead of snapping it to 4-pixel blocks; candidates are ordered by
    descending score, then grid cell, then class.
    """
    cate = _sigmoid_np(cate_logits)  # (G, G, K_thing)
    masks_lo = _sigmoid_np(mask_logits)  # (G*G, Hf, Wf)
    g = cfg.grid_size
    candidates = []
    for cell in range(g * g):
        for cls in range(cfg.k_thing):
            score = float(cate[cell // g, cell % g, cls])
            if score > cfg.pre_nms_score:
                candidates.append((-score, cell, cls))
    candidates.sort()
    masks, categories, scores = [], [], []
    for neg_score, cell, cls in candidates:
        masks.append(upsample_bilinear(masks_lo[cell], STRIDE))
        categories.append(cls)
        scores.append(-neg_score)
    return InstancePrediction(masks=masks, categories=categories, scores=scores)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def upsample_nearest(arr: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)


def upsample_bilinear(arr: np.ndarray, factor: int) -> np.ndarray:
    """Half-pixel-aligned bilinear upscale with edge clamping."""
    h, w = arr.shape
    ys = (np.arange(h * factor) + 0.5) / factor - 0.5
    xs = (np.arange(w * factor) + 0.5) / factor - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    wy = (ys - y0f)[:, None]
    wx = (xs - x0f)[None, :]
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)
    top = arr[y0][:, x0] * (1.0 - wx) + arr[y0][:, x1] * wx
    bottom = arr[y1][:, x0] * (1.0 - wx) + arr[y1][:, x1] * wx
    return top * (1.0 - wy) + bottom * wy
