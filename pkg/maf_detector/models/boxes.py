#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Box geometry
============
Boxes are (x1, y1, x2, y2) in pixels, origin top-left, continuous
coordinates (area = (x2 - x1) * (y2 - y1)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_array(cls, row) -> "BBox":
        return cls(*(float(v) for v in row))


@dataclass
class Annotation:
    """Ground truth of one image; labels index the dataset's class list."""
    boxes: List[BBox] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.boxes) != len(self.labels):
            raise ValueError(f"annotation has {len(self.boxes)} boxes but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.boxes)

    def box_array(self) -> np.ndarray:
        return boxes_to_array(self.boxes)

    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_list() for b in boxes], dtype=np.float64)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of a[N,4] and b[M,4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _centers(boxes: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) taking anchors onto gt."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gx, gy, gw, gh = _centers(gt)
    ax, ay, aw, ah = _centers(anchors)
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _centers(anchors)
    # exp overflow guard for untrained heads
    dw = np.clip(deltas[:, 2], None, np.log(1000.0 / 16))
    dh = np.clip(deltas[:, 3], None, np.log(1000.0 / 16))
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    return boxes


def anchor_array(feature_shape: Tuple[int, int], stride: int = 16,
                 sizes: Sequence[int] = (16, 32, 48),
                 image_shape: Tuple[int, int] = None) -> np.ndarray:
    """Square anchors per cell, ordered (row, col, size), clipped to the image."""
    rows, cols = feature_shape
    if image_shape is None:
        image_shape = (rows * stride, cols * stride)
    ys = (np.arange(rows) + 0.5) * stride
    xs = (np.arange(cols) + 0.5) * stride
    cy, cx, size = np.meshgrid(ys, xs, np.asarray(sizes, dtype=np.float64), indexing="ij")
    half = 0.5 * size.reshape(-1)
    cx, cy = cx.reshape(-1), cy.reshape(-1)
    anchors = np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)
    return clip_boxes(anchors, image_shape[0], image_shape[1])


def generate_anchors(feature_shape: Tuple[int, int], stride: int = 16,
                     sizes: Sequence[int] = (16, 32, 48),
                     image_shape: Tuple[int, int] = None) -> List[BBox]:
    return [BBox.from_array(row) for row in anchor_array(feature_shape, stride, sizes, image_shape)]


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> List[int]:
    """Greedy NMS; returns kept indices by descending score (ties keep input order)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep: List[int] = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        if order.size == 1:
            break
        overlaps = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_threshold]
    return keep
