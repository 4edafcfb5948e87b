"""Semantic correlation module.

Predicts per-location correlation-function parameters from the feature
map (one shared 3x3 convolution, then a 1x1 head per axis) and uses the
resulting correlations as aggregation weights in place of dot-product
attention.  Two aggregation modes:

- global: softmax over all H*W locations of the separable 2D correlation,
  cost O((HW)^2 C);
- axial (default): independent softmaxes along the row and the column of
  each location, summed, cost O(HW (H+W) C).

The output is added to the input features (residual).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corrfn import CorrParamField, corr_profile
from .errors import ShapeError
from .rng import SplitMix64


class MacCounter:
    """Tally of feature-aggregation multiply-accumulates.

    Counts only the weighted feature sums, the asymptotically dominant
    term of each aggregation mode, so mode cost ratios come out exact.
    Advisory instrumentation; not thread-safe.
    """

    def __init__(self):
        self.value = 0

    def add(self, n: int) -> None:
        self.value += int(n)

    def reset(self) -> None:
        self.value = 0


aggregation_macs = MacCounter()


@dataclass
class ScmWeights:
    """One 3x3 trunk convolution and the two per-axis parameter heads."""

    pre_conv: Tensor
    pre_bias: Tensor
    hor_head: Tensor
    hor_bias: Tensor
    ver_head: Tensor
    ver_bias: Tensor

    @classmethod
    def init(cls, channels: int, n_terms: int, rng: SplitMix64) -> "ScmWeights":
        k = 2 * n_terms + 1
        return cls(
            pre_conv=ad.init_parameter((3, 3, channels, channels), 9 * channels, rng),
            pre_bias=ad.zeros_parameter((channels,)),
            hor_head=ad.init_parameter((1, 1, channels, k), channels, rng),
            hor_bias=ad.zeros_parameter((k,)),
            ver_head=ad.init_parameter((1, 1, channels, k), channels, rng),
            ver_bias=ad.zeros_parameter((k,)),
        )

    @property
    def n_terms(self) -> int:
        return (self.hor_head.shape[3] - 1) // 2

    def parameters(self, prefix: str = "scm") -> dict:
        return {
            f"{prefix}.pre_conv": self.pre_conv,
            f"{prefix}.pre_bias": self.pre_bias,
            f"{prefix}.hor_head": self.hor_head,
            f"{prefix}.hor_bias": self.hor_bias,
            f"{prefix}.ver_head": self.ver_head,
            f"{prefix}.ver_bias": self.ver_bias,
        }


def predict_params(features: Tensor, weights: ScmWeights) -> CorrParamField:
    """Densely predict each location's horizontal/vertical parameters."""
    base = ad.conv2d(features, weights.pre_conv) + weights.pre_bias
    hor = ad.conv2d(base, weights.hor_head) + weights.hor_bias
    ver = ad.conv2d(base, weights.ver_head) + weights.ver_bias
    return CorrParamField(hor=hor, ver=ver)


def _require_matching(features: Tensor, field: CorrParamField) -> None:
    h, w = features.shape[0], features.shape[1]
    if (field.height, field.width) != (h, w):
        raise ShapeError(
            f"parameter field {field.height}x{field.width} does not match "
            f"features {h}x{w}"
        )


def _profiles(field: CorrParamField, height: int, width: int):
    """Correlation of each location to every column (hor) and row (ver)."""
    hor = corr_profile(field.hor, np.arange(width, dtype=float), width)
    ver = corr_profile(field.ver, np.arange(height, dtype=float), height)
    return hor, ver  # (H, W, W) and (H, W, H)


def aggregate_global(features: Tensor, field: CorrParamField) -> Tensor:
    """Softmax-weighted sum over all locations, weights from 2D correlations."""
    _require_matching(features, field)
    h, w, c = features.shape
    hor, ver = _profiles(field, h, w)
    cor2d = ad.mul(
        ad.reshape(ver, (h, w, h, 1)), ad.reshape(hor, (h, w, 1, w))
    )
    weights = ad.softmax(ad.reshape(cor2d, (h * w, h * w)), axis=-1)
    aggregation_macs.add(h * w * h * w * c)
    out = weights @ ad.reshape(features, (h * w, c))
    return ad.reshape(out, (h, w, c))


def axial_terms(features: Tensor, field: CorrParamField):
    """Row- and column-aggregated features, each under its own softmax."""
    _require_matching(features, field)
    h, w, c = features.shape
    hor, ver = _profiles(field, h, w)
    row_w = ad.softmax(hor, axis=-1)
    row_term = row_w @ features  # (H,W,W) @ (H,W,C)
    col_w = ad.transpose(ad.softmax(ver, axis=-1), (1, 0, 2))  # (W,H,H)
    col_feats = ad.transpose(features, (1, 0, 2))  # (W,H,C)
    col_term = ad.transpose(col_w @ col_feats, (1, 0, 2))
    aggregation_macs.add(h * w * w * c + h * w * h * c)
    return row_term, col_term


def aggregate_axial(features: Tensor, field: CorrParamField) -> Tensor:
    row_term, col_term = axial_terms(features, field)
    return row_term + col_term


AGGREGATORS = {"global": aggregate_global, "axial": aggregate_axial}


def scm_forward(features: Tensor, weights: ScmWeights, mode: str = "axial") -> Tensor:
    """features + aggregate(features, predicted params); default axial mode."""
    try:
        aggregate = AGGREGATORS[mode]
    except KeyError:
        raise ValueError(
            f"unknown aggregation mode {mode!r}; use 'global' or 'axial'"
        ) from None
    return features + aggregate(features, predict_params(features, weights))
