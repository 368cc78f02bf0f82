"""Shared trunk producing the feature map all heads consume.

A three-stage residual network: each stage opens with a stride-2 block
(so a 64px input ends at 8x8) and keeps the channel width of its stage.
Instance-batch normalization sits in the early stages when enabled. There
is deliberately no global pooling at the end; heads pool for themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .layers import Module, ResidualBlock


@dataclass
class BackboneConfig:
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 1
    ibn_enabled: bool = True
    in_channels: int = 3
    # stages with IBN in their blocks (early stages only)
    ibn_stages: tuple = (0, 1)

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    def out_spatial(self, size: int) -> int:
        out = size
        for _ in self.stage_channels:
            out = (out + 1) // 2
        return out

    def validate(self, image_size: int):
        if self.out_spatial(image_size) < 2:
            raise ValueError(
                f"input {image_size}px leaves feature map below 2x2 after "
                f"{len(self.stage_channels)} stride-2 stages")
        for i in self.ibn_stages:
            if self.ibn_enabled and self.stage_channels[i] % 2 != 0:
                raise ValueError(f"IBN stage {i} needs even channels, got {self.stage_channels[i]}")


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        self.blocks = []
        cin = cfg.in_channels
        for si, cout in enumerate(cfg.stage_channels):
            ibn = cfg.ibn_enabled and si in cfg.ibn_stages
            for bi in range(cfg.blocks_per_stage):
                stride = 2 if bi == 0 else 1
                self.blocks.append(ResidualBlock(cin, cout, rng, stride=stride, ibn=ibn, dtype=dtype))
                cin = cout

    def __call__(self, images: nm.Tensor, train: bool) -> nm.Tensor:
        x = images
        for block in self.blocks:
            x = block(x, train)
        return x
