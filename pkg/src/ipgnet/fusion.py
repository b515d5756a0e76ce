"""Fusion of a pyramid-branch feature with a backbone feature.

Three variants over the same skeleton: first the pyramid feature's
channel axis is linearly resampled to the backbone width (channel
transform), then both sides pass through 1x1 linear maps, then they are
combined by sum, by a residual product under layer norm, or by
concatenation and projection.

Initialization makes every variant start as a (near-)identity on the
backbone feature: the pyramid-side map starts at zero, the backbone-side
maps start as identity, so a fresh network reproduces its plain-backbone
twin exactly (sum, concat) or up to the layer norm (product).
"""

from __future__ import annotations

import numpy as np

from . import ops
from .layers import Conv2d, LayerNorm, ParamInit, identity_pointwise
from .tensor import Tensor, add, concat_channels, mul

__all__ = ["FUSION_VARIANTS", "FeatureFusion", "AlignmentError",
           "fuse_sum", "fuse_residual_product", "fuse_concat"]

FUSION_VARIANTS = ("sum", "product", "concat")


class AlignmentError(ValueError):
    """Pyramid-branch and backbone features disagree spatially at a fusion
    point; the stride schedules are out of step."""


def _check_aligned(f: Tensor, r: Tensor) -> None:
    if f.shape[0] != r.shape[0] or f.shape[2:] != r.shape[2:]:
        raise AlignmentError(
            f"fusion inputs must match in batch and spatial dims; "
            f"pyramid branch {f.shape} vs backbone {r.shape}"
        )


class FeatureFusion:
    """One fusion point: holds the linear maps for a given backbone width."""

    def __init__(self, init: ParamInit, name: str, variant: str, channels: int):
        if variant not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant {variant!r}; expected one of {FUSION_VARIANTS}")
        self.variant = variant
        self.channels = channels
        self.w_s = Conv2d(init, f"{name}.w_s", channels, channels, 1, weight_init="zeros")
        self.w_m = Conv2d(init, f"{name}.w_m", channels, channels, 1, weight_init="identity")
        if variant == "sum":
            self.w = Conv2d(init, f"{name}.w", channels, channels, 1, bias=True, weight_init="identity")
            self.ln = None
        elif variant == "concat":
            kernel = np.zeros((channels, 2 * channels, 1, 1))
            kernel[:, channels:] = identity_pointwise(channels)
            self.w = Conv2d(init, f"{name}.w", 2 * channels, channels, 1, bias=True, weight_init=kernel)
            self.ln = None
        else:
            self.w = None
            self.ln = LayerNorm(f"{name}.ln", channels)

    def __call__(self, f: Tensor, r: Tensor) -> Tensor:
        if self.variant == "sum":
            return fuse_sum(f, r, self)
        if self.variant == "product":
            return fuse_residual_product(f, r, self)
        return fuse_concat(f, r, self)

    def _branches(self, f: Tensor, r: Tensor):
        _check_aligned(f, r)
        ct = ops.channel_interp(f, r.shape[1])
        return self.w_s(ct), self.w_m(r)

    def parameters(self):
        params = self.w_s.parameters() + self.w_m.parameters()
        if self.w is not None:
            params += self.w.parameters()
        if self.ln is not None:
            params += self.ln.parameters()
        return params


def fuse_sum(f: Tensor, r: Tensor, fusion: FeatureFusion) -> Tensor:
    """Projected elementwise sum of the two branches."""
    side, main = fusion._branches(f, r)
    return fusion.w(add(side, main))


def fuse_residual_product(f: Tensor, r: Tensor, fusion: FeatureFusion) -> Tensor:
    """Layer-normed residual: r plus the branch product, no outer projection."""
    side, main = fusion._branches(f, r)
    return fusion.ln(add(mul(side, main), r))


def fuse_concat(f: Tensor, r: Tensor, fusion: FeatureFusion) -> Tensor:
    """Channel concatenation of the branches projected back to the backbone width."""
    side, main = fusion._branches(f, r)
    return fusion.w(concat_channels(side, main))
