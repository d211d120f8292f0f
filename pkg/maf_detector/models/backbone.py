#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Five-block convolutional backbone
=================================
Each block is (conv3x3 + relu) x 2; blocks 1-4 are followed by a 2x2 max
pool, so blocks 3, 4 and 5 run at strides 4, 8 and 16.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..layers import Conv2d, Module
from ..tensor import ShapeError, Tensor, maxpool2d, relu

WIDTHS = (8, 16, 32, 32, 32)
ALIGNED_BLOCKS = (3, 4, 5)
BLOCK_STRIDES = {3: 4, 4: 8, 5: 16}


@dataclass
class BackboneFeatures:
    block3: Tensor
    block4: Tensor
    block5: Tensor

    def block(self, m: int) -> Tensor:
        if m not in ALIGNED_BLOCKS:
            raise KeyError(f"no exposed feature map for block {m}")
        return getattr(self, f"block{m}")


class ConvBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, pad=1)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, pad=1)

    def children(self):
        return (("conv1", self.conv1), ("conv2", self.conv2))

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.conv2(relu(self.conv1(x))))


class Backbone(Module):
    def __init__(self, rng: np.random.Generator, in_channels: int = 3, widths: Sequence[int] = WIDTHS):
        self.widths = tuple(widths)
        self.blocks: List[ConvBlock] = []
        previous = in_channels
        for width in self.widths:
            self.blocks.append(ConvBlock(previous, width, rng))
            previous = width

    def children(self):
        return tuple((f"block{i + 1}", block) for i, block in enumerate(self.blocks))

    def channels(self, m: int) -> int:
        return self.widths[m - 1]

    def forward(self, image: Tensor) -> BackboneFeatures:
        if image.values.ndim != 3 or image.shape[1] % 16 or image.shape[2] % 16:
            raise ShapeError(f"backbone input must be [C,H,W] with H, W divisible by 16, got {image.shape}")
        outputs: Dict[int, Tensor] = {}
        x = image
        for index, block in enumerate(self.blocks, start=1):
            x = block(x)
            outputs[index] = x
            if index < len(self.blocks):
                x = maxpool2d(x, 2, 2)
        return BackboneFeatures(outputs[3], outputs[4], outputs[5])

    __call__ = forward


def backbone_forward(image: Tensor, backbone: Backbone) -> BackboneFeatures:
    return backbone.forward(image)


def feature_shape(image_shape: Tuple[int, int], m: int) -> Tuple[int, int]:
    stride = BLOCK_STRIDES[m]
    return image_shape[0] // stride, image_shape[1] // stride
