#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Detection evaluation
====================
Per class, detections from the whole set are ranked by score. Each detection
targets the ground-truth box of its image and class with the highest IoU
(first on ties) and is a true positive when that IoU reaches the threshold
and the box is still unmatched. AP is the area under the precision envelope
(all points); mAP averages the classes that have ground truth.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .models.boxes import Annotation, iou_matrix
from .models.detector import Detection, MiniDetector
from .synthetic_domains import DomainSample
from .tensor import Tensor

logger = logging.getLogger(__name__)

SWEEP_THRESHOLDS = tuple(float(t) for t in np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class ClassResult:
    name: str
    ap: Optional[float]
    n_gt: int
    n_det: int


@dataclass
class EvalResult:
    iou_thr: float
    classes: List[ClassResult] = field(default_factory=list)
    map: float = 0.0

    def to_dict(self) -> Dict:
        return {
            "iou_thr": self.iou_thr,
            "map": self.map,
            "classes": {c.name: {"ap": c.ap, "n_gt": c.n_gt, "n_det": c.n_det} for c in self.classes},
        }

    def ap(self, name: str) -> Optional[float]:
        for c in self.classes:
            if c.name == name:
                return c.ap
        raise KeyError(name)


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-points AP of a ranked list of TP flags."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    hits = np.cumsum(tp)
    recall = hits / n_gt
    precision = hits / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def match_class(detections: Sequence[Tuple[int, np.ndarray, float]], gt_boxes: Dict[int, np.ndarray],
                iou_thr: float) -> np.ndarray:
    """TP flags for (image, box, score) detections of one class, in score order.

    VOC matching: a detection only competes for its highest-IoU ground-truth box
    (first on ties). If that box is already taken the detection is a false
    positive, even when another unmatched box clears the threshold.
    """
    order = sorted(range(len(detections)), key=lambda k: -detections[k][2])
    matched = {image: np.zeros(len(boxes), dtype=bool) for image, boxes in gt_boxes.items()}
    tp = np.zeros(len(detections))
    for rank, k in enumerate(order):
        image, box, _ = detections[k]
        boxes = gt_boxes.get(image)
        if boxes is None or len(boxes) == 0:
            continue
        overlaps = iou_matrix(box[None, :], boxes)[0]
        j = int(overlaps.argmax())
        if overlaps[j] >= iou_thr and not matched[image][j]:
            matched[image][j] = True
            tp[rank] = 1.0
    return tp


def evaluate_detections(detections: Sequence[Sequence[Detection]], annotations: Sequence[Annotation],
                        classes: Sequence[str], iou_thr: float = 0.5) -> EvalResult:
    if len(annotations) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if len(detections) != len(annotations):
        raise ValueError(f"{len(detections)} detection lists for {len(annotations)} images")
    result = EvalResult(iou_thr)
    aps = []
    for label, name in enumerate(classes):
        gt = {}
        for image, ann in enumerate(annotations):
            picked = [b.as_list() for b, l in zip(ann.boxes, ann.labels) if l == label]
            gt[image] = np.asarray(picked, dtype=np.float64).reshape(-1, 4)
        n_gt = sum(len(b) for b in gt.values())
        dets = [(image, np.asarray(d.box.as_list()), d.score)
                for image, found in enumerate(detections) for d in found if d.label == label]
        ap = None
        if n_gt:
            ap = average_precision(match_class(dets, gt, iou_thr), n_gt)
            aps.append(ap)
        result.classes.append(ClassResult(name, ap, n_gt, len(dets)))
    if not aps:
        raise ValueError("dataset has no ground-truth boxes")
    result.map = float(np.mean(aps))
    return result


def run_detector(detector: MiniDetector, samples: Sequence[DomainSample], quiet: bool = True) -> List[List[Detection]]:
    return [detector.detect(Tensor(s.image)) for s in tqdm(samples, desc="Detecting", unit="img", disable=quiet)]


def _annotations(samples: Sequence[DomainSample]) -> List[Annotation]:
    missing = [s.file for s in samples if s.annotation is None]
    if missing:
        raise ValueError(f"evaluation needs labelled images, {missing[0]!r} has no annotation")
    return [s.annotation for s in samples]


def evaluate_map(detector: MiniDetector, samples: Sequence[DomainSample], classes: Sequence[str],
                 iou_thr: float = 0.5, quiet: bool = True) -> EvalResult:
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    annotations = _annotations(samples)
    result = evaluate_detections(run_detector(detector, samples, quiet), annotations, classes, iou_thr)
    logger.info(f"mAP@{iou_thr:g} = {result.map:.4f} over {len(samples)} images")
    return result


def iou_sweep(detector: MiniDetector, samples: Sequence[DomainSample], classes: Sequence[str],
              thresholds: Sequence[float] = SWEEP_THRESHOLDS, quiet: bool = True) -> List[Tuple[float, float]]:
    """mAP per threshold; detections are computed once and rematched."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    annotations = _annotations(samples)
    detections = run_detector(detector, samples, quiet)
    return [(float(t), evaluate_detections(detections, annotations, classes, t).map) for t in thresholds]


def write_sweep_csv(path: Union[str, Path], rows: Sequence[Tuple[float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("threshold", "map"))
        for threshold, value in rows:
            writer.writerow((f"{threshold:.2f}", repr(float(value))))
