"""Image pyramid construction: the input image repeatedly halved."""

from __future__ import annotations

from dataclasses import dataclass

from .ops import resize_bilinear
from .tensor import ShapeError, Tensor

__all__ = ["PyramidSet", "build_pyramid"]


@dataclass
class PyramidSet:
    """Ordered images, level i at exactly (H / 2^i, W / 2^i); level 0 is the input."""

    levels: list[Tensor]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]


def build_pyramid(image: Tensor, n_levels: int) -> PyramidSet:
    """Halve ``image`` n_levels-1 times with align-corners bilinear sampling.

    Spatial dims must be divisible by 2^(n_levels-1) so every level is an
    exact integer size; callers pad images up front rather than here.
    """
    if n_levels < 2:
        raise ValueError(f"a pyramid needs at least 2 levels, got {n_levels}")
    _, _, h, w = image.shape
    multiple = 2 ** (n_levels - 1)
    if h % multiple or w % multiple:
        raise ShapeError(
            f"image dims {h}x{w} must be divisible by {multiple} "
            f"for a {n_levels}-level pyramid"
        )
    levels = [image]
    for i in range(1, n_levels):
        levels.append(resize_bilinear(image, h >> i, w >> i))
    return PyramidSet(levels)
