#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Adversarial feature alignment
=============================
Block level:    block map -> GRL -> SRM -> 1x1 conv head -> per-location
                domain logits, cross-entropy against the image's domain.
Proposal level: [F^k, c^k, b^k] -> WGRL -> MLP -> domain logits.

Domain label 1 is source and 0 is target; logit column 1 is the source class.
"""

from __future__ import annotations

import logging
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..adversarial import SrmSpec, grl, srm_forward, wgrl
from ..layers import Conv2d, Linear, Module
from ..tensor import (ShapeError, Tensor, add, concat, no_grad, relu, reshape, scale, softmax,
                      softmax_cross_entropy, stack, transpose)
from .backbone import ALIGNED_BLOCKS, BackboneFeatures
from .detector import ProposalRecord

logger = logging.getLogger(__name__)

REDUCTIONS = ("mean", "sum")


def _check_domain(d: int) -> int:
    if d not in (0, 1):
        raise ValueError(f"domain label must be 1 (source) or 0 (target), got {d!r}")
    return int(d)


def _reduce(loss: Tensor, count: int, reduction: str) -> Tensor:
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    return scale(loss, count) if reduction == "sum" else loss


class BlockDomainClassifier(Module):
    """SRM (1x1 reduce + rearrange) followed by a 1x1 conv head with 2 outputs."""

    def __init__(self, in_channels: int, rng: np.random.Generator, srm: SrmSpec = SrmSpec(), hidden: int = 16):
        self.srm = srm
        self.reduce = Conv2d(in_channels, srm.out_channels, 1, rng)
        self.conv1 = Conv2d(srm.out_channels * srm.s * srm.s, hidden, 1, rng)
        self.conv2 = Conv2d(hidden, 2, 1, rng)

    def children(self):
        return (("reduce", self.reduce), ("conv1", self.conv1), ("conv2", self.conv2))

    def logits(self, x: Tensor) -> Tensor:
        """[L, 2] domain logits, one row per SRM-reduced location (row-major)."""
        maps = self.conv2(relu(self.conv1(srm_forward(x, self.srm, self.reduce))))
        return transpose(reshape(maps, (2, -1)), (1, 0))

    __call__ = logits


class ProposalDomainClassifier(Module):
    def __init__(self, in_features: int, rng: np.random.Generator, hidden: int = 32):
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, 2, rng)

    @property
    def in_features(self) -> int:
        return self.fc1.in_features

    def children(self):
        return (("fc1", self.fc1), ("fc2", self.fc2))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))

    def source_probability(self, x: Tensor) -> np.ndarray:
        """Detached softmax probability of the source class per row."""
        with no_grad():
            return softmax(self(Tensor(x.values))).values[:, 1]


def block_domain_loss(x: Tensor, d: int, classifier: BlockDomainClassifier, reduction: str = "mean") -> Tensor:
    """Cross-entropy of every location's domain logits against d, without reversal."""
    d = _check_domain(d)
    logits = classifier(x)
    locations = logits.shape[0]
    return _reduce(softmax_cross_entropy(logits, np.full(locations, d)), locations, reduction)


def hierarchical_alignment_loss(features: BackboneFeatures, d: int,
                                classifiers: Mapping[int, BlockDomainClassifier], lam: float = 1.0,
                                reduction: str = "mean") -> Tuple[Tensor, Tensor, Tensor]:
    """(L_3, L_4, L_5); blocks without a classifier contribute a constant 0."""
    losses: Dict[int, Tensor] = {m: Tensor(0.0) for m in ALIGNED_BLOCKS}
    for m in sorted(classifiers):
        losses[m] = block_domain_loss(grl(features.block(m), lam), d, classifiers[m], reduction)
    return losses[3], losses[4], losses[5]


def aggregate_proposal_features(record: ProposalRecord, aggregate: bool = True) -> Tensor:
    """F^k, c^k and b^k concatenated in that order (F^k alone when aggregate is off)."""
    if not aggregate:
        return record.feature
    return concat([record.feature, record.cls_scores, record.bbox_reg], axis=0)


def proposal_alignment_loss(records: Sequence[ProposalRecord], d: int, classifier: ProposalDomainClassifier,
                            lam: float = 1.0, weighted: bool = True, aggregate: bool = True,
                            reduction: str = "mean",
                            p_override: Optional[Union[float, np.ndarray]] = None) -> Tensor:
    """L_p over the proposals of one image.

    p_override replaces the classifier's own source probabilities as the
    WGRL weights source.
    """
    d = _check_domain(d)
    if not records:
        logger.warning("Proposal alignment got no proposals; L_p contributes 0")
        return Tensor(0.0)
    x = stack([aggregate_proposal_features(r, aggregate) for r in records])
    if x.shape[1] != classifier.in_features:
        raise ShapeError(f"aggregated proposal width {x.shape[1]} does not match classifier "
                         f"input {classifier.in_features}")
    n = x.shape[0]
    if weighted:
        if p_override is None:
            p = classifier.source_probability(x)
        else:
            p = np.broadcast_to(np.asarray(p_override, dtype=np.float64), (n,))
        reversed_x = wgrl(x, lam, p, d)
    else:
        reversed_x = grl(x, lam)
    loss = softmax_cross_entropy(classifier(reversed_x), np.full(n, d))
    return _reduce(loss, n, reduction)


def total_alignment_loss(l_3: Tensor, l_4: Tensor, l_5: Tensor, l_p: Tensor) -> Tensor:
    """L_t = L_p + L_3 + L_4 + L_5, summed in that order."""
    return add(add(add(l_p, l_3), l_4), l_5)
