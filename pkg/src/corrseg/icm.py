"""Instance correlation module.

Identical-looking instances produce identical visual features, so masks
keyed on appearance alone cannot tell them apart.  This module gives each
location a positional signature: its correlation values against a fixed
uniform grid of S*S reference points, stacked into an S*S-channel vector,
projected to C channels and added to the (linearly projected) features.

The parameter-prediction head mirrors the semantic module's structure but
owns independent weights; the two projections carry no bias, so the
positional contribution is exactly linear in the correlation values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import scm
from .autodiff import Tensor
from .corrfn import CorrParamField, corr_profile
from .errors import ShapeError
from .rng import SplitMix64


@dataclass
class ReferenceGrid:
    """Centers of a uniform s-by-s partition of an H-by-W feature map."""

    s: int
    height: int
    width: int
    points: np.ndarray  # (s*s, 2) as (x, y), row-major over grid cells

    @property
    def n_points(self) -> int:
        return self.s * self.s


def make_reference_grid(height: int, width: int, s: int) -> ReferenceGrid:
    """Reference point (i, j) sits at x=(j+0.5)*W/s, y=(i+0.5)*H/s."""
    if s < 1:
        raise ValueError(f"reference grid side must be at least 1, got {s}")
    if s > 2 * min(height, width):
        raise ValueError(
            f"reference grid side {s} too fine for a {height}x{width} map"
        )
    ii, jj = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    xs = (jj.reshape(-1) + 0.5) * width / s
    ys = (ii.reshape(-1) + 0.5) * height / s
    return ReferenceGrid(s=s, height=height, width=width,
                         points=np.stack([xs, ys], axis=1))


def reference_correlations(field: CorrParamField, refs: ReferenceGrid) -> Tensor:
    """(H, W, S*S) tensor; channel k is the 2D correlation of u to point P_k."""
    if (field.height, field.width) != (refs.height, refs.width):
        raise ShapeError(
            f"reference grid built for {refs.height}x{refs.width}, "
            f"parameter field is {field.height}x{field.width}"
        )
    hor = corr_profile(field.hor, refs.points[:, 0], refs.width)
    ver = corr_profile(field.ver, refs.points[:, 1], refs.height)
    return ad.mul(hor, ver)


@dataclass
class IcmWeights:
    """Parameter-prediction trunk/heads plus the two bias-free projections."""

    pre_conv: Tensor
    pre_bias: Tensor
    hor_head: Tensor
    hor_bias: Tensor
    ver_head: Tensor
    ver_bias: Tensor
    feat_proj: Tensor  # (1, 1, C, C)
    corr_proj: Tensor  # (1, 1, S*S, C)

    @classmethod
    def init(cls, channels: int, n_terms: int, s: int, rng: SplitMix64) -> "IcmWeights":
        k = 2 * n_terms + 1
        return cls(
            pre_conv=ad.init_parameter((3, 3, channels, channels), 9 * channels, rng),
            pre_bias=ad.zeros_parameter((channels,)),
            hor_head=ad.init_parameter((1, 1, channels, k), channels, rng),
            hor_bias=ad.zeros_parameter((k,)),
            ver_head=ad.init_parameter((1, 1, channels, k), channels, rng),
            ver_bias=ad.zeros_parameter((k,)),
            feat_proj=ad.init_parameter((1, 1, channels, channels), channels, rng),
            corr_proj=ad.init_parameter((1, 1, s * s, channels), s * s, rng),
        )

    @property
    def n_terms(self) -> int:
        return (self.hor_head.shape[3] - 1) // 2

    def parameters(self, prefix: str = "icm") -> dict:
        return {
            f"{prefix}.pre_conv": self.pre_conv,
            f"{prefix}.pre_bias": self.pre_bias,
            f"{prefix}.hor_head": self.hor_head,
            f"{prefix}.hor_bias": self.hor_bias,
            f"{prefix}.ver_head": self.ver_head,
            f"{prefix}.ver_bias": self.ver_bias,
            f"{prefix}.feat_proj": self.feat_proj,
            f"{prefix}.corr_proj": self.corr_proj,
        }

    def _theta_head(self) -> scm.ScmWeights:
        return scm.ScmWeights(
            pre_conv=self.pre_conv, pre_bias=self.pre_bias,
            hor_head=self.hor_head, hor_bias=self.hor_bias,
            ver_head=self.ver_head, ver_bias=self.ver_bias,
        )


def predict_params(features: Tensor, weights: IcmWeights) -> CorrParamField:
    return scm.predict_params(features, weights._theta_head())


def combine(features: Tensor, corrs: Tensor, weights: IcmWeights) -> Tensor:
    """Projected features plus projected correlations, both bias-free."""
    return ad.conv2d(features, weights.feat_proj) + ad.conv2d(corrs, weights.corr_proj)


def icm_forward(features: Tensor, weights: IcmWeights, refs: ReferenceGrid) -> Tensor:
    field = predict_params(features, weights)
    corrs = reference_correlations(field, refs)
    return combine(features, corrs, weights)
