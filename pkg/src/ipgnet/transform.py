"""Per-level shallow feature extractor for the image pyramid branch.

Each pyramid level gets its own parameters.  The structure is a 7x7
stride-2 convolution, batch norm and ReLU, a 2x2 max pool, then one
bottleneck block expanding to the level's target width, so every output
sits at stride 4 relative to its own pyramid level.  The narrow stem
keeps the branch light: widths stay at c1/4 until the final expansion.
"""

from __future__ import annotations

from . import ops
from .layers import BatchNorm2d, Bottleneck, Conv2d, ParamInit
from .tensor import ShapeError, Tensor, relu

__all__ = ["PyramidLevelTransform"]


class PyramidLevelTransform:
    """Maps pyramid level ``level`` to a feature map of c1 * 2**level channels."""

    def __init__(self, init: ParamInit, name: str, level: int, c1: int, in_channels: int = 3):
        self.level = level
        self.out_channels = c1 * 2 ** level
        stem_width = max(c1 // 4, 4)
        self.stem_conv = Conv2d(init, f"{name}.stem", in_channels, stem_width, 7, stride=2, padding=3)
        self.stem_bn = BatchNorm2d(init, f"{name}.stem_bn", stem_width)
        self.block = Bottleneck(init, f"{name}.block", stem_width, self.out_channels, mid=stem_width)

    def __call__(self, image: Tensor, training: bool = False) -> Tensor:
        _, _, h, w = image.shape
        if h % 4 or w % 4:
            raise ShapeError(
                f"pyramid level input {h}x{w} must be divisible by 4 "
                f"(7x7/2 stem then 2x2 pool)"
            )
        x = relu(self.stem_bn(self.stem_conv(image), training))
        x = ops.maxpool2(x)
        return self.block(x, training)

    def parameters(self):
        return self.stem_conv.parameters() + self.stem_bn.parameters() + self.block.parameters()
