#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Region proposal network
=======================
A 3x3 conv over block 5 followed by 1x1 heads with 2*A objectness logits and
4*A box deltas per cell. Per-anchor rows are ordered (row, col, anchor),
matching anchor_array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from ..layers import Conv2d, Module
from ..tensor import Tensor, relu, reshape, transpose
from .boxes import BBox, clip_boxes, decode_boxes, nms


@dataclass
class RpnOutput:
    objectness_map: Tensor   # [2A, h, w]
    delta_map: Tensor        # [4A, h, w]
    logits: Tensor           # [h*w*A, 2], column 1 is foreground
    deltas: Tensor           # [h*w*A, 4]

    def foreground_scores(self) -> np.ndarray:
        logits = self.logits.values
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e[:, 1] / e.sum(axis=1)


class RegionProposalNetwork(Module):
    def __init__(self, in_channels: int, num_anchors: int, rng: np.random.Generator, width: int = 32):
        self.num_anchors = num_anchors
        self.conv = Conv2d(in_channels, width, 3, rng, pad=1)
        self.cls = Conv2d(width, 2 * num_anchors, 1, rng)
        self.reg = Conv2d(width, 4 * num_anchors, 1, rng)

    def children(self):
        return (("conv", self.conv), ("cls", self.cls), ("reg", self.reg))

    def forward(self, block5: Tensor) -> RpnOutput:
        hidden = relu(self.conv(block5))
        objectness = self.cls(hidden)
        deltas = self.reg(hidden)
        _, h, w = objectness.shape
        rows = h * w * self.num_anchors
        logits = reshape(transpose(objectness, (1, 2, 0)), (rows, 2))
        per_anchor = reshape(transpose(deltas, (1, 2, 0)), (rows, 4))
        return RpnOutput(objectness, deltas, logits, per_anchor)

    __call__ = forward


def rpn_forward(block5: Tensor, rpn: RegionProposalNetwork) -> RpnOutput:
    return rpn.forward(block5)


def rank_proposals(anchors: np.ndarray, objectness: np.ndarray, deltas: np.ndarray,
                   image_shape: Tuple[int, int], top_n: int = 32, nms_iou: float = 0.7,
                   min_size: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Decode every anchor, drop slivers, greedy NMS by objectness, keep top_n.

    Returns the kept boxes [n,4] and their objectness [n], best first.
    """
    boxes = clip_boxes(decode_boxes(deltas, anchors), image_shape[0], image_shape[1])
    scores = np.asarray(objectness, dtype=np.float64).reshape(-1)
    valid = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
    index = np.flatnonzero(valid)
    keep = index[nms(boxes[index], scores[index], nms_iou)[:top_n]]
    return boxes[keep], scores[keep]


def select_proposals(anchors: np.ndarray, objectness: np.ndarray, deltas: np.ndarray,
                     image_shape: Tuple[int, int], top_n: int = 32, nms_iou: float = 0.7) -> List[BBox]:
    boxes, _ = rank_proposals(anchors, objectness, deltas, image_shape, top_n, nms_iou)
    return [BBox.from_array(row) for row in boxes]
