#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Finite-difference gradient checks
=================================
grad_check projects the output onto a fixed random direction R and compares
the tape gradient of sum(R * f) with central differences, one input
coordinate at a time. The suite covers every primitive and the composite
paths of the detector and its alignment heads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .adversarial import SrmSpec, grl, srm_forward, srm_rearrange, wgrl, wgrl_weights
from .layers import Conv2d
from .models.alignment import BlockDomainClassifier, ProposalDomainClassifier, block_domain_loss
from .models.backbone import Backbone
from .models.boxes import BBox
from .models.detector import DetectionHead, roi_pool
from .tensor import (Tape, Tensor, add, affine, backward, concat, conv2d, gather_rows, maxpool2d, mean_all, mul,
                     no_grad, reshape, relu, scale, sigmoid, smooth_l1, softmax, softmax_cross_entropy, sub,
                     sum_all, take, transpose)

logger = logging.getLogger(__name__)

Build = Callable[[int], Tuple[Callable[..., Tensor], List[Tensor]]]


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst: Optional[Tuple[int, Tuple[int, ...]]]
    checked: int


def _coordinates(analytic: np.ndarray, rng: np.random.Generator, max_checks: Optional[int],
                 min_magnitude: float) -> List[Tuple[int, ...]]:
    flat = np.flatnonzero(np.abs(analytic).reshape(-1) >= min_magnitude)
    if max_checks is not None and flat.size > max_checks:
        flat = np.sort(rng.choice(flat, size=max_checks, replace=False))
    return [tuple(int(i) for i in np.unravel_index(k, analytic.shape)) for k in flat]


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               max_checks: Optional[int] = None, min_magnitude: float = 0.0, seed: int = 0,
               numeric_scale: Optional[Sequence[Union[float, np.ndarray]]] = None) -> GradCheckResult:
    """Worst relative error |a - n| / max(|a|, |n|, 1e-8) over the checked coordinates.

    numeric_scale[i] multiplies the finite-difference gradient of input i
    before comparison; reversal layers are checked against -lambda times it.
    """
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        out = f(*inputs)
        direction = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
        loss = sum_all(mul(out, Tensor(direction)))
    if loss.node_id is None:
        analytic = [np.zeros(t.shape) for t in inputs]
    else:
        grads = backward(tape, loss)
        analytic = [grads[t] for t in inputs]

    def evaluate() -> np.ndarray:
        with no_grad():
            return f(*inputs).values

    worst, worst_at, checked = 0.0, None, 0
    for index, (tensor, grad) in enumerate(zip(inputs, analytic)):
        factor = np.broadcast_to(1.0 if numeric_scale is None else numeric_scale[index], tensor.shape)
        original = tensor.values
        for coord in _coordinates(grad, rng, max_checks, min_magnitude):
            bumped = original.copy()
            bumped[coord] = original[coord] + eps
            tensor.values = bumped
            plus = evaluate()
            bumped = original.copy()
            bumped[coord] = original[coord] - eps
            tensor.values = bumped
            minus = evaluate()
            tensor.values = original
            # elementwise differences avoid cancelling two large projected sums
            numeric = factor[coord] * float(np.sum(direction * (plus - minus))) / (2.0 * eps)
            a = grad[coord]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if err > worst:
                worst, worst_at = err, (index, coord)
    return GradCheckResult(worst, worst_at, checked)


def smooth_seed(build: Build, margin: float = 1e-4, tries: int = 200) -> int:
    """First seed whose forward pass keeps every relu input and pooling gap at least margin away from a kink."""
    for seed in range(tries):
        f, inputs = build(seed)
        with Tape() as tape:
            f(*inputs)
        if tape.kink_margin >= margin:
            return seed
    raise RuntimeError(f"no seed in range({tries}) is {margin} away from every kink")


###############################################################################
# Suite                                                                       #
###############################################################################

@dataclass
class GradCase:
    name: str
    build: Build
    tolerance: float = 1e-5
    smooth: bool = False
    max_checks: Optional[int] = None
    min_magnitude: float = 0.0
    numeric_scale: Optional[Callable[[List[Tensor]], Sequence]] = None


@dataclass
class CaseReport:
    name: str
    max_rel_err: float
    tolerance: float
    checked: int
    seed: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<24} max rel err {self.max_rel_err:.3e} ({self.checked} coords)"


def _leaf(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, *shape) -> Tensor:
    values = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(values, requires_grad=True)


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 42])


def _elementwise(op):
    def build(seed):
        rng = _rng(seed)
        return op, [_leaf(rng, 3, 4), _leaf(rng, 3, 4)]
    return build


def _unary(op, make=_leaf, shape=(3, 4)):
    def build(seed):
        rng = _rng(seed)
        return op, [make(rng, *shape)]
    return build


def _affine(seed):
    rng = _rng(seed)
    return affine, [_leaf(rng, 3, 4), _leaf(rng, 4, 2), _leaf(rng, 2)]


def _conv(stride, pad):
    def build(seed):
        rng = _rng(seed)
        return (lambda x, k, b: conv2d(x, k, b, stride=stride, pad=pad)), \
            [_leaf(rng, 2, 5, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)]
    return build


def _maxpool(seed):
    rng = _rng(seed)
    return (lambda x: maxpool2d(x, 2, 2)), [_leaf(rng, 2, 4, 6)]


def _cross_entropy(seed):
    rng = _rng(seed)
    labels = rng.integers(0, 3, size=4)
    return (lambda z: softmax_cross_entropy(z, labels)), [_leaf(rng, 4, 3, low=-3, high=3)]


def _smooth_l1(seed):
    rng = _rng(seed)
    target = Tensor(rng.uniform(-2, 2, size=(5, 4)))
    return (lambda p: smooth_l1(p, target)), [_leaf(rng, 5, 4, low=-2, high=2)]


def _concat(seed):
    rng = _rng(seed)
    return (lambda a, b: concat([a, b], axis=1)), [_leaf(rng, 2, 3), _leaf(rng, 2, 2)]


def _shape_ops(seed):
    rng = _rng(seed)
    return (lambda x: transpose(reshape(x, (3, 8)), (1, 0))), [_leaf(rng, 2, 3, 4)]


def _gather(seed):
    rng = _rng(seed)
    return (lambda x: add(gather_rows(x, [2, 0, 2]), reshape(concat([take(x, 1)] * 3), (3, 3)))), \
        [_leaf(rng, 4, 3)]


def _roi_pool(seed):
    rng = _rng(seed)
    box = BBox(8.0, 4.0, 83.0, 70.0)
    return (lambda x: roi_pool(x, box, 3)), [_leaf(rng, 2, 6, 6)]


def _grl(lam):
    def build(seed):
        rng = _rng(seed)
        return (lambda x: grl(x, lam)), [_leaf(rng, 3, 4)]
    return build


WGRL_P = np.array([0.9, 0.25, 0.5, 1.0])


def _wgrl(seed):
    rng = _rng(seed)
    return (lambda x: wgrl(x, 0.5, WGRL_P, 1)), [_leaf(rng, 4, 3)]


def _wgrl_scale(inputs):
    return [(-0.5 * wgrl_weights(WGRL_P, 1))[:, None]]


def _srm_rearrange(seed):
    rng = _rng(seed)
    return (lambda x: srm_rearrange(x, 2)), [_leaf(rng, 3, 4, 6)]


def _srm_forward(seed):
    rng = _rng(seed)
    conv = Conv2d(4, 3, 1, rng)
    conv.bias.values = rng.uniform(-0.5, 0.5, size=3)
    spec = SrmSpec(2, 3)
    return (lambda x, w, b: srm_forward(x, spec, conv)), [_leaf(rng, 4, 4, 4), conv.weight, conv.bias]


def _backbone(seed):
    rng = np.random.default_rng([seed, 7])
    backbone = Backbone(rng)
    image = _leaf(rng, 3, 16, 16, low=0.0, high=1.0)
    first = backbone.blocks[0].conv1.weight
    last = backbone.blocks[4].conv2.weight

    def f(x, w1, w5):
        features = backbone(x)
        return concat([reshape(features.block(m), (-1,)) for m in (3, 4, 5)])

    return f, [image, first, last]


def _detection_head(seed):
    rng = _rng(seed)
    head = DetectionHead(18, 3, rng)

    def f(x, w):
        out = head(x)
        return concat([out.scores, out.bbox_reg], axis=1)

    return f, [_leaf(rng, 2, 18), head.fc1.weight]


def _block_classifier(seed):
    rng = _rng(seed)
    clf = BlockDomainClassifier(4, rng, SrmSpec(2, 4))
    return (lambda x, w: block_domain_loss(x, 1, clf)), [_leaf(rng, 4, 4, 4), clf.reduce.weight]


def _proposal_path(seed):
    """F^k, c^k, b^k through the aggregation, WGRL with fixed weights and the domain MLP."""
    rng = _rng(seed)
    clf = ProposalDomainClassifier(10, rng)
    feature, logits, reg = _leaf(rng, 5), _leaf(rng, 3), _leaf(rng, 2)

    def f(a, z, r):
        x = reshape(concat([a, softmax(z), r]), (1, -1))
        return softmax_cross_entropy(clf(wgrl(x, 1.0, [0.25], 1)), [1])

    return f, [feature, logits, reg]


def _two_layer(seed):
    rng = _rng(seed)
    w1, b1 = _leaf(rng, 4, 5), _leaf(rng, 5)
    w2, b2 = _leaf(rng, 5, 3), _leaf(rng, 3)
    x = Tensor(rng.uniform(-1, 1, size=(6, 4)))
    labels = rng.integers(0, 3, size=6)
    return (lambda a, b, c, d: softmax_cross_entropy(affine(relu(affine(x, a, b)), c, d), labels)), [w1, b1, w2, b2]


SUITE: List[GradCase] = [
    GradCase("add", _elementwise(add)),
    GradCase("sub", _elementwise(sub)),
    GradCase("mul", _elementwise(mul)),
    GradCase("scale", _unary(lambda x: scale(x, -2.5))),
    GradCase("sum", _unary(sum_all)),
    GradCase("mean", _unary(mean_all)),
    GradCase("affine", _affine),
    GradCase("conv2d", _conv(1, 1)),
    GradCase("conv2d_stride2", _conv(2, 1)),
    GradCase("relu", _unary(relu, _away_from_zero)),
    GradCase("sigmoid", _unary(sigmoid, shape=(3, 4))),
    GradCase("maxpool2d", _maxpool, smooth=True),
    GradCase("softmax", _unary(softmax)),
    GradCase("softmax_cross_entropy", _cross_entropy),
    GradCase("smooth_l1", _smooth_l1),
    GradCase("concat", _concat),
    GradCase("reshape_transpose", _shape_ops),
    GradCase("take_gather", _gather),
    GradCase("roi_pool", _roi_pool, smooth=True),
    GradCase("grl", _grl(0.5), numeric_scale=lambda inputs: [-0.5]),
    GradCase("wgrl", _wgrl, numeric_scale=_wgrl_scale),
    GradCase("srm_rearrange", _srm_rearrange, tolerance=1e-8),
    GradCase("srm_forward", _srm_forward),
    GradCase("two_layer_net", _two_layer, smooth=True),
    GradCase("backbone", _backbone, smooth=True, max_checks=25, min_magnitude=1e-3),
    GradCase("detection_head", _detection_head, smooth=True),
    GradCase("block_classifier", _block_classifier, smooth=True),
    GradCase("proposal_alignment", _proposal_path, smooth=True, numeric_scale=lambda inputs: [-0.25] * 3),
]


def run_case(case: GradCase) -> CaseReport:
    seed = smooth_seed(case.build) if case.smooth else 0
    f, inputs = case.build(seed)
    scale_ = case.numeric_scale(inputs) if case.numeric_scale is not None else None
    result = grad_check(f, inputs, max_checks=case.max_checks, min_magnitude=case.min_magnitude,
                        numeric_scale=scale_)
    report = CaseReport(case.name, result.max_rel_err, case.tolerance, result.checked, seed)
    logger.debug(report.line())
    return report


def run_suite(names: Optional[Sequence[str]] = None) -> List[CaseReport]:
    cases: Dict[str, GradCase] = {case.name: case for case in SUITE}
    if names:
        unknown = [n for n in names if n not in cases]
        if unknown:
            raise ValueError(f"unknown gradcheck case {unknown[0]!r}")
        selected = [cases[n] for n in names]
    else:
        selected = list(SUITE)
    return [run_case(case) for case in selected]
