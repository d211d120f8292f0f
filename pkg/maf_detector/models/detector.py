#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Miniature two-stage detector
============================
Backbone -> RPN -> proposal selection -> ROI pooling on block 5 ->
two FC layers (the 64-d proposal feature) -> class scores and a
class-agnostic box refinement.

Class indices: annotation labels are 0..K-1; the head's class axis has
K+1 entries with 0 for background, so label l maps to column l + 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from ..config_manager import DetectorConfig
from ..layers import Linear, Module
from ..tensor import (Tensor, add, apply_op, gather_rows, no_grad, note_window_gap, relu, reshape,
                      smooth_l1, softmax, softmax_cross_entropy, stack, take)
from .backbone import BLOCK_STRIDES, Backbone, BackboneFeatures
from .boxes import Annotation, BBox, anchor_array, clip_boxes, decode_boxes, encode_boxes, iou_matrix, nms
from .rpn import RegionProposalNetwork, RpnOutput, rank_proposals

logger = logging.getLogger(__name__)

SOURCE = 1
TARGET = 0
HIDDEN = 64
ROI_STRIDE = BLOCK_STRIDES[5]


###############################################################################
# ROI pooling                                                                 #
###############################################################################

def roi_span(lo: float, hi: float, stride: int, size: int) -> Tuple[int, int]:
    """Feature-map cells [start, end) covered by the pixel interval [lo, hi)."""
    start = min(max(int(math.floor(lo / stride)), 0), size - 1)
    end = min(max(int(math.ceil(hi / stride)), start + 1), size)
    return start, end


def roi_bins(start: int, end: int, grid: int) -> List[Tuple[int, int]]:
    length = end - start
    return [(start + (i * length) // grid, start + -((-(i + 1) * length) // grid)) for i in range(grid)]


def roi_pool(feature: Tensor, box: BBox, grid: int = 3, stride: int = ROI_STRIDE) -> Tensor:
    """Max-pool the projected box into a grid x grid map; gradient goes to each bin's first argmax."""
    c, h, w = feature.shape
    y0, y1 = roi_span(box.y1, box.y2, stride, h)
    x0, x1 = roi_span(box.x1, box.x2, stride, w)
    rows, cols = roi_bins(y0, y1, grid), roi_bins(x0, x1, grid)

    out = np.empty((c, grid, grid))
    src_y = np.empty((c, grid, grid), dtype=np.int64)
    src_x = np.empty((c, grid, grid), dtype=np.int64)
    channels = np.arange(c)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            window = feature.values[:, r0:r1, c0:c1].reshape(c, -1)
            flat = window.argmax(axis=1)
            out[:, i, j] = window[channels, flat]
            src_y[:, i, j] = r0 + flat // (c1 - c0)
            src_x[:, i, j] = c0 + flat % (c1 - c0)
            note_window_gap(window)

    def _backward(g):
        grad = np.zeros(feature.shape)
        np.add.at(grad, (np.broadcast_to(channels[:, None, None], g.shape), src_y, src_x), g)
        return (grad,)

    return apply_op("roi_pool", (feature,), out, _backward)


###############################################################################
# Heads and records                                                           #
###############################################################################

@dataclass
class HeadOutput:
    features: Tensor     # [N, 64], the proposal feature F^k
    logits: Tensor       # [N, K+1]
    scores: Tensor       # [N, K+1] softmax
    bbox_reg: Tensor     # [N, 4]


class DetectionHead(Module):
    def __init__(self, in_features: int, num_classes: int, rng: np.random.Generator, hidden: int = HIDDEN):
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.cls = Linear(hidden, num_classes + 1, rng)
        self.reg = Linear(hidden, 4, rng)

    def children(self):
        return (("fc1", self.fc1), ("fc2", self.fc2), ("cls", self.cls), ("reg", self.reg))

    def forward(self, pooled: Tensor) -> HeadOutput:
        """pooled is [N, C*g*g]."""
        features = relu(self.fc2(relu(self.fc1(pooled))))
        logits = self.cls(features)
        return HeadOutput(features, logits, softmax(logits), self.reg(features))

    __call__ = forward


def detection_head(pooled: Tensor, head: DetectionHead) -> Tuple[Tensor, Tensor]:
    """Scores [K+1] and box refinement [4] of one pooled ROI."""
    out = head(reshape(pooled, (1, -1)))
    return take(out.scores, 0), take(out.bbox_reg, 0)


@dataclass
class ProposalRecord:
    box: BBox
    feature: Tensor
    cls_scores: Tensor
    bbox_reg: Tensor
    objectness: float


@dataclass
class Detection:
    box: BBox
    label: int
    score: float


@dataclass
class DetectorOutput:
    image_shape: Tuple[int, int]
    features: BackboneFeatures
    rpn: RpnOutput
    anchors: np.ndarray
    proposals: np.ndarray        # [n, 4] selected proposals, best first
    objectness: np.ndarray       # [n]
    rois: np.ndarray             # proposals, then appended ground truth
    head: Optional[HeadOutput]
    records: List[ProposalRecord] = field(default_factory=list)


###############################################################################
# Detector                                                                    #
###############################################################################

class MiniDetector(Module):
    def __init__(self, num_classes: int, config: DetectorConfig, rng: np.random.Generator):
        self.num_classes = num_classes
        self.config = config
        self.backbone = Backbone(rng)
        self.rpn = RegionProposalNetwork(self.backbone.channels(5), len(config.anchor_sizes), rng)
        pooled = self.backbone.channels(5) * config.roi_grid * config.roi_grid
        self.head = DetectionHead(pooled, num_classes, rng)

    def children(self):
        return (("backbone", self.backbone), ("rpn", self.rpn), ("head", self.head))

    def anchors(self, image_shape: Tuple[int, int]) -> np.ndarray:
        feature = (image_shape[0] // ROI_STRIDE, image_shape[1] // ROI_STRIDE)
        return anchor_array(feature, ROI_STRIDE, self.config.anchor_sizes, image_shape)

    def forward(self, image: Tensor, annotation: Optional[Annotation] = None) -> DetectorOutput:
        """Run the detector; annotation boxes join the ROIs when detector.append_gt is set."""
        cfg = self.config
        image_shape = (image.shape[1], image.shape[2])
        features = self.backbone(image)
        rpn = self.rpn(features.block5)
        anchors = self.anchors(image_shape)
        proposals, objectness = rank_proposals(anchors, rpn.foreground_scores(), rpn.deltas.values,
                                               image_shape, cfg.top_n, cfg.nms_iou)
        rois = proposals
        if annotation is not None and cfg.append_gt and len(annotation):
            rois = np.concatenate([proposals, annotation.box_array()], axis=0)

        out = DetectorOutput(image_shape, features, rpn, anchors, proposals, objectness, rois, None)
        if len(rois) == 0:
            logger.warning("No proposals survived selection")
            return out
        pooled = stack([roi_pool(features.block5, BBox.from_array(row), cfg.roi_grid) for row in rois])
        out.head = self.head(reshape(pooled, (len(rois), -1)))
        out.records = [
            ProposalRecord(BBox.from_array(proposals[k]), take(out.head.features, k),
                           take(out.head.scores, k), take(out.head.bbox_reg, k), float(objectness[k]))
            for k in range(len(proposals))
        ]
        return out

    __call__ = forward

    def detect(self, image: Tensor) -> List[Detection]:
        cfg = self.config
        with no_grad():
            out = self.forward(image)
        if out.head is None:
            return []
        boxes = clip_boxes(decode_boxes(out.head.bbox_reg.values, out.rois), *out.image_shape)
        scores = out.head.scores.values
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        found: List[Detection] = []
        for label in range(self.num_classes):
            column = scores[:, label + 1]
            index = np.flatnonzero(valid & (column > cfg.score_thr))
            for k in nms(boxes[index], column[index], cfg.test_nms_iou):
                found.append(Detection(BBox.from_array(boxes[index[k]]), label, float(column[index[k]])))
        found.sort(key=lambda d: -d.score)
        return found[:cfg.max_detections]


###############################################################################
# Training targets and loss                                                   #
###############################################################################

@dataclass
class Assignment:
    labels: np.ndarray      # -1 ignored, 0 background, else class column
    matched: np.ndarray     # index of the best ground-truth box per row

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def positive(self) -> np.ndarray:
        return np.flatnonzero(self.labels > 0)


def assign_targets(boxes: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                   fg_iou: float = 0.5, bg_iou: float = 0.3, best_match: bool = False) -> Assignment:
    """IoU >= fg_iou: the matched box's class; IoU < bg_iou: background; otherwise ignored.

    With best_match every ground-truth box also claims its highest-IoU row,
    so no object is left without a positive anchor.
    """
    n = len(boxes)
    if len(gt_boxes) == 0:
        return Assignment(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))
    overlaps = iou_matrix(boxes, gt_boxes)
    matched = overlaps.argmax(axis=1)
    best = overlaps[np.arange(n), matched]
    labels = np.full(n, -1, dtype=np.int64)
    labels[best < bg_iou] = 0
    fg = best >= fg_iou
    labels[fg] = gt_classes[matched[fg]]
    if best_match:
        for j in range(len(gt_boxes)):
            i = int(overlaps[:, j].argmax())
            if overlaps[i, j] > 0:
                labels[i] = gt_classes[j]
                matched[i] = j
    return Assignment(labels, matched)


def _classification_and_regression(logits: Tensor, deltas: Tensor, rows: np.ndarray, gt_boxes: np.ndarray,
                                   assignment: Assignment) -> Tensor:
    kept, positive = assignment.kept, assignment.positive
    if kept.size == 0:
        return Tensor(0.0)
    loss = softmax_cross_entropy(gather_rows(logits, kept), assignment.labels[kept])
    if positive.size:
        targets = encode_boxes(gt_boxes[assignment.matched[positive]], rows[positive])
        loss = add(loss, smooth_l1(gather_rows(deltas, positive), targets))
    return loss


def detection_loss(output: DetectorOutput, annotation: Annotation, config: DetectorConfig,
                   domain: int = SOURCE) -> Tensor:
    """L_det: RPN objectness + RPN regression + head classification + head regression."""
    if domain != SOURCE:
        raise ValueError("detection loss is only defined for source-domain samples")
    if annotation is None:
        raise ValueError("detection loss needs an annotation")
    gt_boxes = annotation.box_array()
    gt_labels = annotation.label_array()

    rpn_assignment = assign_targets(output.anchors, gt_boxes, np.ones(len(gt_boxes), dtype=np.int64),
                                    config.fg_iou, config.bg_iou, best_match=True)
    loss = _classification_and_regression(output.rpn.logits, output.rpn.deltas, output.anchors,
                                          gt_boxes, rpn_assignment)
    if output.head is not None:
        head_assignment = assign_targets(output.rois, gt_boxes, gt_labels + 1, config.fg_iou, config.bg_iou)
        loss = add(loss, _classification_and_regression(output.head.logits, output.head.bbox_reg, output.rois,
                                                        gt_boxes, head_assignment))
    return loss
