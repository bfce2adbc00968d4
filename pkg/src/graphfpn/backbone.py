"""Toy five-stage convolutional backbone and the conventional top-down FPN.

Spatial area quarters per stage (strides 1,2,2,2,2), mirroring the 4:1
superpixel count reduction, so grid cells and hierarchy levels correspond.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import ContractError, Tensor

STAGE_STRIDES = (1, 2, 2, 2, 2)


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 96, 128)
    fpn_channels: int = 32
    input_size: int = 64

    def __post_init__(self):
        if len(self.stage_channels) != 5:
            raise ContractError("backbone needs exactly 5 stages")
        if self.input_size % 16 != 0:
            raise ContractError("input size must be divisible by 16 (four stride-2 stages)")

    @property
    def grid_sizes(self) -> list[int]:
        sizes, s = [], self.input_size
        for stride in STAGE_STRIDES:
            s //= stride
            sizes.append(s)
        return sizes


def init_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Xavier-initialized stage convs, FPN laterals, and smoothing convs."""
    params: dict[str, Tensor] = {}

    def conv(name, c_out, c_in, k):
        fan_in, fan_out = c_in * k * k, c_out * k * k
        params[name + ".weight"] = Tensor(
            nm.xavier_uniform(rng, (c_out, c_in, k, k), fan_in, fan_out), requires_grad=True
        )
        params[name + ".bias"] = Tensor.zeros((c_out,), requires_grad=True)

    c_prev = 3
    for i, c_out in enumerate(cfg.stage_channels, start=1):
        conv(f"backbone.stage{i}.conv1", c_out, c_prev, 3)
        conv(f"backbone.stage{i}.conv2", c_out, c_out, 3)
        c_prev = c_out
    for i, c in enumerate(cfg.stage_channels, start=1):
        conv(f"fpn.lateral{i}", cfg.fpn_channels, c, 1)
    for i in range(1, 5):
        conv(f"fpn.smooth{i}", cfg.fpn_channels, cfg.fpn_channels, 3)
    return params


def _conv_block(x: Tensor, params: dict[str, Tensor], name: str, stride: int) -> Tensor:
    y = nm.conv2d(x, params[name + ".weight"], stride=stride)
    return nm.add_channel_bias(y, params[name + ".bias"])


def backbone_forward(image: Tensor, params: dict[str, Tensor], cfg: BackboneConfig) -> list[Tensor]:
    """Five stages of conv3x3(stride) -> ReLU -> conv3x3 -> ReLU; returns C1..C5."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"backbone expects a (3, H, W) image, got {image.shape}")
    maps = []
    h = image
    for i, stride in enumerate(STAGE_STRIDES, start=1):
        h = nm.relu(_conv_block(h, params, f"backbone.stage{i}.conv1", stride))
        h = nm.relu(_conv_block(h, params, f"backbone.stage{i}.conv2", 1))
        maps.append(h)
    return maps


def fpn_forward(c_maps: list[Tensor], params: dict[str, Tensor], cfg: BackboneConfig) -> list[Tensor]:
    """Top-down pyramid: P5 = lateral(C5); lower levels add the upsampled
    coarser map to their lateral and smooth with a 3x3 conv. Returns P1..P5."""
    p5 = _conv_block(c_maps[4], params, "fpn.lateral5", 1)
    pyramid = [None, None, None, None, p5]
    for i in range(4, 0, -1):
        lateral = _conv_block(c_maps[i - 1], params, f"fpn.lateral{i}", 1)
        merged = nm.add(lateral, nm.upsample2_nearest(pyramid[i]))
        pyramid[i - 1] = _conv_block(merged, params, f"fpn.smooth{i}", 1)
    return pyramid
