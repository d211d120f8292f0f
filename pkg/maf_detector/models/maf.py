#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Detector with multi-level adversarial alignment
===============================================
Bundles the detector with its domain classifiers and composes the
training objective L_MAF = L_det + alpha * L_t.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from ..adversarial import SrmSpec
from ..config_manager import RunConfig
from ..layers import Module
from ..tensor import Tensor, add, scale
from .alignment import (BlockDomainClassifier, ProposalDomainClassifier, hierarchical_alignment_loss,
                        proposal_alignment_loss, total_alignment_loss)
from .boxes import Annotation
from .detector import HIDDEN, SOURCE, TARGET, DetectorOutput, MiniDetector, detection_loss

logger = logging.getLogger(__name__)


@dataclass
class LossTerms:
    """Loss tensors of one iteration, all recorded on the same tape."""
    l_det: Tensor
    l_3: Tensor
    l_4: Tensor
    l_5: Tensor
    l_p: Tensor
    l_t: Tensor
    l_maf: Tensor


def _average(a: Tensor, b: Tensor) -> Tensor:
    return scale(add(a, b), 0.5)


class MafModel(Module):
    def __init__(self, num_classes: int, config: RunConfig):
        self.config = config
        self.num_classes = num_classes
        # detector and classifiers draw from separate streams so toggling alignment
        # never changes the detector's initial weights
        detector_rng = np.random.default_rng([config.seed.init, 0])
        classifier_rng = np.random.default_rng([config.seed.init, 1])
        self.detector = MiniDetector(num_classes, config.detector, detector_rng)

        align = config.align
        srm = SrmSpec(align.srm_s, align.srm_channels)
        self.block_classifiers: Dict[int, BlockDomainClassifier] = {
            m: BlockDomainClassifier(self.detector.backbone.channels(m), classifier_rng, srm)
            for m in sorted(align.blocks)
        }
        self.proposal_classifier: Optional[ProposalDomainClassifier] = None
        if align.proposal:
            width = HIDDEN + (num_classes + 1) + 4 if align.aggregate else HIDDEN
            self.proposal_classifier = ProposalDomainClassifier(width, classifier_rng)

    def children(self):
        named = [("detector", self.detector)]
        named.extend((f"block{m}_classifier", clf) for m, clf in self.block_classifiers.items())
        if self.proposal_classifier is not None:
            named.append(("proposal_classifier", self.proposal_classifier))
        return named

    def detector_parameters(self) -> List[Tensor]:
        return self.detector.parameters()

    def alignment_losses(self, output: DetectorOutput, d: int) -> List[Tensor]:
        """[L_3, L_4, L_5, L_p] of one image."""
        align = self.config.align
        l_3, l_4, l_5 = hierarchical_alignment_loss(output.features, d, self.block_classifiers,
                                                    align.grl_lambda, align.reduction)
        l_p = Tensor(0.0)
        if self.proposal_classifier is not None:
            l_p = proposal_alignment_loss(output.records, d, self.proposal_classifier, align.grl_lambda,
                                          weighted=align.wgrl, aggregate=align.aggregate,
                                          reduction=align.reduction)
        return [l_3, l_4, l_5, l_p]

    def loss_terms(self, source_image: Tensor, annotation: Annotation, target_image: Tensor) -> LossTerms:
        """Forward one source and one target image and compose every loss."""
        source = self.detector(source_image, annotation)
        l_det = detection_loss(source, annotation, self.config.detector, SOURCE)

        if self.config.align.enabled:
            target = self.detector(target_image)
            per_source = self.alignment_losses(source, SOURCE)
            per_target = self.alignment_losses(target, TARGET)
            l_3, l_4, l_5, l_p = (_average(a, b) for a, b in zip(per_source, per_target))
        else:
            l_3 = l_4 = l_5 = l_p = Tensor(0.0)
        l_t = total_alignment_loss(l_3, l_4, l_5, l_p)
        l_maf = add(l_det, scale(l_t, self.config.alpha))
        return LossTerms(l_det, l_3, l_4, l_5, l_p, l_t, l_maf)
