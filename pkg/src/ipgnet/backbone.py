"""Staged bottleneck backbone with pyramid-guidance hooks and an FPN neck.

Stage s (1-indexed) runs two bottleneck blocks and lands on stride
4 * 2^(s-1); stages past 4 keep the stage-4 channel width.  With
``keep_last3`` (7-stage nets) the last three stages hold the stage-4
stride and use dilation-2 convolutions instead of downsampling.  A stage
listed in ``fusion_stages`` feeds its output through a fusion point fed
by pyramid level s-1, and the fused feature both continues down the
backbone and serves as that stage's FPN lateral source.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .fusion import FUSION_VARIANTS, FeatureFusion
from .layers import BatchNorm2d, Bottleneck, Conv2d, ParamInit
from .ops import max_pool2d, resize_bilinear
from .pyramid import PyramidSet
from .tensor import Tensor, add, relu

__all__ = ["ConfigError", "NetworkConfig", "validate_config", "validate_input_size",
           "stage_strides", "stage_channels", "required_multiple",
           "IpgNet", "last_k_outputs"]


class ConfigError(ValueError):
    """Raised for architecture configurations the validator does not admit."""


@dataclass(frozen=True)
class NetworkConfig:
    c1: int = 16
    n_stages: int = 4
    keep_last3: bool = False
    fusion_variant: str = "sum"
    fusion_stages: tuple[int, ...] = (3,)
    pyramid_levels: int = 4
    fpn_channels: int = 32
    n_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "fusion_stages", tuple(sorted(self.fusion_stages)))


def validate_config(cfg: NetworkConfig) -> None:
    if not 4 <= cfg.n_stages <= 7:
        raise ConfigError(f"n_stages must be in [4, 7], got {cfg.n_stages}")
    if cfg.c1 < 4 or cfg.c1 % 4:
        raise ConfigError(f"c1 must be a positive multiple of 4, got {cfg.c1}")
    if cfg.pyramid_levels < 2:
        raise ConfigError(f"pyramid_levels must be >= 2, got {cfg.pyramid_levels}")
    if cfg.fusion_variant not in FUSION_VARIANTS:
        raise ConfigError(f"fusion_variant must be one of {FUSION_VARIANTS}, got {cfg.fusion_variant!r}")
    if cfg.fpn_channels < 1 or cfg.n_classes < 1:
        raise ConfigError("fpn_channels and n_classes must be >= 1")
    if cfg.keep_last3 and cfg.n_stages != 7:
        # Kept stages must all lie past stage 4, whose stride is fixed.
        raise ConfigError("keep_last3 requires n_stages == 7")
    if len(set(cfg.fusion_stages)) != len(cfg.fusion_stages):
        raise ConfigError(f"duplicate fusion stages in {cfg.fusion_stages}")
    for s in cfg.fusion_stages:
        if not 1 <= s <= cfg.n_stages:
            raise ConfigError(f"fusion stage {s} outside [1, {cfg.n_stages}]")
        if s - 1 >= cfg.pyramid_levels:
            raise ConfigError(
                f"fusion stage {s} needs pyramid level {s - 1}, "
                f"but only {cfg.pyramid_levels} levels are configured"
            )
        if cfg.keep_last3 and s >= kept_from(cfg):
            raise ConfigError(
                f"fusion stage {s} is inside the kept-stride tail; "
                f"its pyramid branch could never align spatially"
            )


def kept_from(cfg: NetworkConfig) -> int:
    """First stage index with held stride, or n_stages+1 when none are held."""
    return cfg.n_stages - 2 if cfg.keep_last3 else cfg.n_stages + 1


def stage_strides(cfg: NetworkConfig) -> list[int]:
    strides, stride = [], 4
    for s in range(1, cfg.n_stages + 1):
        if s > 1 and s < kept_from(cfg):
            stride *= 2
        strides.append(stride)
    return strides


def stage_channels(cfg: NetworkConfig) -> list[int]:
    # widths double through stage 4, then stay capped
    return [cfg.c1 * 2 ** (min(s, 4) - 1) for s in range(1, cfg.n_stages + 1)]


def required_multiple(cfg: NetworkConfig) -> int:
    """Input dims must divide by this for every stage and fused level to land
    on exact integer sizes."""
    need = max(stage_strides(cfg)[-1], 2 ** (cfg.pyramid_levels - 1))
    for s in cfg.fusion_stages:
        need = max(need, 4 * 2 ** (s - 1))
    return need


def validate_input_size(cfg: NetworkConfig, h: int, w: int) -> None:
    multiple = required_multiple(cfg)
    if h % multiple or w % multiple:
        raise ConfigError(
            f"input {h}x{w} must be divisible by {multiple} for this "
            f"configuration; pad the image first"
        )


def last_k_outputs(stage_outputs: list[Tensor], k: int) -> list[Tensor]:
    """The final k stage outputs (the deep-feature-only evaluation hook)."""
    if not 1 <= k <= len(stage_outputs):
        raise ConfigError(f"cannot take last {k} of {len(stage_outputs)} stage outputs")
    return stage_outputs[-k:]


class IpgNet:
    """Backbone + fusion points + FPN.  With ``fusion_stages=()`` this is a
    plain staged bottleneck network; parameter initialization is keyed by
    name, so the plain and guided networks share backbone weights exactly."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        validate_config(config)
        self.config = config
        init = ParamInit(seed)
        c1 = config.c1
        stem_width = max(c1 // 4, 4)

        self.stem_conv = Conv2d(init, "backbone.stem", 3, stem_width, 7, stride=2, padding=3)
        self.stem_bn = BatchNorm2d(init, "backbone.stem_bn", stem_width)

        channels = stage_channels(config)
        held = kept_from(config)
        self.stages: list[list[Bottleneck]] = []
        c_in = stem_width
        for s in range(1, config.n_stages + 1):
            c_out = channels[s - 1]
            stride = 2 if (s > 1 and s < held) else 1
            dilation = 2 if s >= held else 1
            blocks = [
                Bottleneck(init, f"backbone.s{s}.b1", c_in, c_out, mid=c_out // 4,
                           stride=stride, dilation=dilation),
                Bottleneck(init, f"backbone.s{s}.b2", c_out, c_out, mid=c_out // 4,
                           dilation=dilation),
            ]
            self.stages.append(blocks)
            c_in = c_out

        from .transform import PyramidLevelTransform  # local import avoids a cycle

        self.transforms: dict[int, PyramidLevelTransform] = {}
        self.fusions: dict[int, FeatureFusion] = {}
        for s in config.fusion_stages:
            level = s - 1
            self.transforms[s] = PyramidLevelTransform(init, f"guide.l{level}", level, c1)
            self.fusions[s] = FeatureFusion(init, f"fuse.s{s}", config.fusion_variant,
                                            channels[s - 1])

        self.laterals = [
            Conv2d(init, f"fpn.lat{s}", channels[s - 1], config.fpn_channels, 1, bias=True)
            for s in range(1, config.n_stages + 1)
        ]
        self.smooths = [
            Conv2d(init, f"fpn.out{s}", config.fpn_channels, config.fpn_channels, 3,
                   padding=1, bias=True)
            for s in range(1, config.n_stages + 1)
        ]

    # ---- forward ----------------------------------------------------------

    def forward_backbone(self, pyramid: PyramidSet, training: bool = False) -> list[Tensor]:
        """Stage outputs, with fused features replacing raw ones at fusion stages."""
        cfg = self.config
        _, _, h, w = pyramid[0].shape
        validate_input_size(cfg, h, w)
        if cfg.fusion_stages and pyramid.n_levels < max(cfg.fusion_stages):
            raise ConfigError(
                f"pyramid has {pyramid.n_levels} levels but fusion stage "
                f"{max(cfg.fusion_stages)} needs level {max(cfg.fusion_stages) - 1}"
            )
        x = relu(self.stem_bn(self.stem_conv(pyramid[0]), training))
        x = max_pool2d(x, kernel=3, stride=2, padding=1)
        outputs = []
        for s, blocks in enumerate(self.stages, start=1):
            for block in blocks:
                x = block(x, training)
            if s in self.fusions:
                guide = self.transforms[s](pyramid[s - 1], training)
                x = self.fusions[s](guide, x)
            outputs.append(x)
        return outputs

    def forward_fpn(self, stage_outputs: list[Tensor]) -> list[Tensor]:
        """Top-down pathway: upsample-and-add laterals, then 3x3 smoothing."""
        if len(stage_outputs) < 2:
            raise ConfigError("the top-down pathway needs at least 2 stage outputs")
        laterals = [lat(out) for lat, out in zip(self.laterals, stage_outputs)]
        tops = [laterals[-1]]
        for lateral in reversed(laterals[:-1]):
            _, _, h, w = lateral.shape
            tops.insert(0, add(resize_bilinear(tops[0], h, w), lateral))
        return [smooth(p) for smooth, p in zip(self.smooths, tops)]

    def forward(self, pyramid: PyramidSet, training: bool = False) -> list[Tensor]:
        return self.forward_fpn(self.forward_backbone(pyramid, training))

    # ---- parameters -------------------------------------------------------

    def backbone_parameters(self):
        params = self.stem_conv.parameters() + self.stem_bn.parameters()
        for blocks in self.stages:
            for block in blocks:
                params += block.parameters()
        return params

    def guidance_parameters(self):
        params = []
        for s in sorted(self.transforms):
            params += self.transforms[s].parameters()
            params += self.fusions[s].parameters()
        return params

    def fpn_parameters(self):
        params = []
        for lat, smooth in zip(self.laterals, self.smooths):
            params += lat.parameters() + smooth.parameters()
        return params

    def parameters(self):
        return self.backbone_parameters() + self.guidance_parameters() + self.fpn_parameters()

    def named_parameters(self) -> dict:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ConfigError(f"duplicate parameter name {p.name!r}")
            named[p.name] = p
        return named
