#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""Backbone, boxes, RPN, ROI pooling and the detection loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maf_detector.config_manager import DetectorConfig
from maf_detector.gradcheck import grad_check
from maf_detector.models.backbone import Backbone, feature_shape
from maf_detector.models.boxes import (
    Annotation, BBox, anchor_array, decode_boxes, encode_boxes, generate_anchors, iou, iou_matrix, nms,
)
from maf_detector.models.detector import (
    SOURCE, TARGET, DetectionHead, MiniDetector, assign_targets, detection_head, detection_loss, roi_bins, roi_pool,
)
from maf_detector.models.rpn import RegionProposalNetwork, rank_proposals, select_proposals
from maf_detector.tensor import ShapeError, Tape, Tensor, backward, softmax_cross_entropy, add


def random_box(draw_values):
    x1, y1, w, h = draw_values
    return BBox(x1, y1, x1 + w, y1 + h)


box_values = st.tuples(st.floats(0, 80), st.floats(0, 80), st.floats(1, 40), st.floats(1, 40))


class TestBackbone:
    def test_block_shapes(self):
        features = Backbone(np.random.default_rng(0))(Tensor(np.zeros((3, 96, 96))))
        assert features.block3.shape == (32, 24, 24)
        assert features.block4.shape == (32, 12, 12)
        assert features.block5.shape == (32, 6, 6)
        assert feature_shape((96, 96), 5) == (6, 6)

    def test_zero_image_gives_zero_features(self):
        features = Backbone(np.random.default_rng(0))(Tensor(np.zeros((3, 32, 32))))
        for m in (3, 4, 5):
            assert np.all(features.block(m).values == 0.0)

    def test_indivisible_input(self):
        with pytest.raises(ShapeError):
            Backbone(np.random.default_rng(0))(Tensor(np.zeros((3, 40, 40))))

    def test_unexposed_block(self):
        features = Backbone(np.random.default_rng(0))(Tensor(np.zeros((3, 16, 16))))
        with pytest.raises(KeyError):
            features.block(2)


class TestIou:
    def test_examples(self):
        assert iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0
        assert iou(BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)) == 0.0
        assert iou(BBox(0, 0, 10, 10), BBox(5, 5, 15, 15)) == pytest.approx(25 / 175)

    def test_touching_edges(self):
        assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 20, 10)) == 0.0

    def test_rasterized(self):
        a, b = BBox(0, 0, 10, 10), BBox(5, 5, 15, 15)
        grid = np.zeros((20, 20, 2), dtype=bool)
        grid[0:10, 0:10, 0] = True
        grid[5:15, 5:15, 1] = True
        inter = np.sum(grid[..., 0] & grid[..., 1])
        union = np.sum(grid[..., 0] | grid[..., 1])
        assert iou(a, b) == pytest.approx(inter / union)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BBox(5, 5, 5, 10)

    @settings(max_examples=60, deadline=None)
    @given(box_values, box_values)
    def test_symmetric_and_bounded(self, a, b):
        a, b = random_box(a), random_box(b)
        value = iou(a, b)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(iou(b, a))
        assert iou(a, a) == pytest.approx(1.0)
        matrix = iou_matrix(np.array([a.as_list()]), np.array([b.as_list()]))
        assert matrix[0, 0] == pytest.approx(value)


class TestAnchors:
    def test_count(self):
        assert len(generate_anchors((6, 6), 16, (16, 32, 48), (96, 96))) == 108

    def test_cell_anchor(self):
        anchors = anchor_array((6, 6), 16, (16, 32, 48), (96, 96))
        # row 2, col 2, size 32
        assert anchors[(2 * 6 + 2) * 3 + 1].tolist() == [24.0, 24.0, 56.0, 56.0]

    def test_clipped_to_image(self):
        anchors = anchor_array((6, 6), 16, (16, 32, 48), (96, 96))
        assert anchors.min() >= 0.0 and anchors.max() <= 96.0

    def test_zero_deltas_decode_to_anchor(self):
        anchors = anchor_array((6, 6), 16, (16, 32, 48), (96, 96))
        assert np.allclose(decode_boxes(np.zeros((108, 4)), anchors), anchors)

    @settings(max_examples=60, deadline=None)
    @given(box_values, box_values)
    def test_encode_decode(self, gt, anchor):
        gt, anchor = np.array([random_box(gt).as_list()]), np.array([random_box(anchor).as_list()])
        assert np.allclose(decode_boxes(encode_boxes(gt, anchor), anchor), gt, atol=1e-9)


def nms_reference(boxes, scores, threshold):
    remaining = list(np.argsort(-scores, kind="stable"))
    keep = []
    while remaining:
        i = remaining.pop(0)
        keep.append(int(i))
        remaining = [j for j in remaining
                     if iou(BBox.from_array(boxes[i]), BBox.from_array(boxes[j])) <= threshold]
    return keep


def random_boxes(rng, n):
    xy = rng.uniform(0, 70, size=(n, 2))
    wh = rng.uniform(4, 30, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


class TestNms:
    def test_identical_boxes_keep_one(self):
        boxes = np.array([[0, 0, 10, 10]] * 3, dtype=float)
        assert nms(boxes, np.array([0.2, 0.9, 0.5]), 0.7) == [1]

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        boxes, scores = random_boxes(rng, 50), rng.uniform(size=50)
        assert nms(boxes, scores, 0.5) == nms_reference(boxes, scores, 0.5)

    def test_independent_of_input_order(self):
        rng = np.random.default_rng(1)
        boxes, scores = random_boxes(rng, 40), rng.uniform(size=40)
        perm = rng.permutation(40)
        kept = {tuple(boxes[i]) for i in nms(boxes, scores, 0.4)}
        permuted = {tuple(boxes[perm][i]) for i in nms(boxes[perm], scores[perm], 0.4)}
        assert kept == permuted

    def test_empty(self):
        assert nms(np.zeros((0, 4)), np.zeros(0), 0.5) == []


class TestRpn:
    def test_output_shapes(self):
        rpn = RegionProposalNetwork(32, 3, np.random.default_rng(0))
        out = rpn(Tensor(np.random.default_rng(1).normal(size=(32, 6, 6))))
        assert out.objectness_map.shape == (6, 6, 6)
        assert out.delta_map.shape == (12, 6, 6)
        assert out.logits.shape == (108, 2)
        assert out.deltas.shape == (108, 4)
        assert np.all((out.foreground_scores() > 0) & (out.foreground_scores() < 1))

    def test_proposals_capped_and_non_overlapping(self):
        rng = np.random.default_rng(2)
        anchors = anchor_array((6, 6), 16, (16, 32, 48), (96, 96))
        scores = rng.uniform(size=108)
        deltas = rng.normal(scale=0.1, size=(108, 4))
        boxes, kept_scores = rank_proposals(anchors, scores, deltas, (96, 96), top_n=10, nms_iou=0.7)
        assert len(boxes) <= 10
        assert np.all(np.diff(kept_scores) <= 0)
        overlaps = iou_matrix(boxes, boxes)
        np.fill_diagonal(overlaps, 0.0)
        assert overlaps.max() <= 0.7
        assert len(select_proposals(anchors, scores, deltas, (96, 96), 10, 0.7)) == len(boxes)


class TestRoiPool:
    def test_bins_cover_span(self):
        for length in range(1, 8):
            bins = roi_bins(2, 2 + length, 3)
            assert bins[0][0] == 2 and bins[-1][1] == 2 + length
            assert all(lo < hi for lo, hi in bins)

    def test_constant_field(self):
        feature = Tensor(np.full((4, 6, 6), 2.5))
        out = roi_pool(feature, BBox(10, 20, 70, 90), 3)
        assert out.shape == (4, 3, 3)
        assert np.all(out.values == 2.5)

    def test_single_bin_is_region_max(self):
        values = np.random.default_rng(0).normal(size=(2, 6, 6))
        out = roi_pool(Tensor(values), BBox(16, 32, 64, 80), 1)
        assert out.values[:, 0, 0].tolist() == values[:, 2:5, 1:4].reshape(2, -1).max(axis=1).tolist()

    def test_gradient(self):
        x = Tensor(np.random.default_rng(7).uniform(-1, 1, size=(2, 6, 6)), requires_grad=True)
        result = grad_check(lambda t: roi_pool(t, BBox(8.0, 4.0, 83.0, 70.0), 3), [x])
        assert result.max_rel_err < 1e-5


class TestHead:
    def test_scores_sum_to_one(self):
        head = DetectionHead(18, 3, np.random.default_rng(0))
        scores, reg = detection_head(Tensor(np.random.default_rng(1).normal(size=(2, 3, 3))), head)
        assert scores.shape == (4,)
        assert reg.shape == (4,)
        assert scores.values.sum() == pytest.approx(1.0)


class TestAssignment:
    def test_labels(self):
        boxes = np.array([[0, 0, 10, 10], [1, 0, 11, 10], [30, 30, 40, 40], [0, 0, 10, 16]], dtype=float)
        gt = np.array([[0, 0, 10, 10]], dtype=float)
        assignment = assign_targets(boxes, gt, np.array([2]), 0.5, 0.3)
        assert assignment.labels.tolist() == [2, 2, 0, 2]
        assert assignment.positive.tolist() == [0, 1, 3]

    def test_ignored_band(self):
        boxes = np.array([[0, 0, 10, 25]], dtype=float)   # IoU 0.4
        assignment = assign_targets(boxes, np.array([[0, 0, 10, 10]], dtype=float), np.array([1]), 0.5, 0.3)
        assert assignment.labels.tolist() == [-1]
        assert assignment.kept.size == 0

    def test_best_match_claims_an_anchor(self):
        boxes = np.array([[0, 0, 10, 40], [50, 50, 60, 60]], dtype=float)  # IoU 0.25
        gt = np.array([[0, 0, 10, 10]], dtype=float)
        assert assign_targets(boxes, gt, np.array([1]), 0.5, 0.3).labels.tolist() == [0, 0]
        assert assign_targets(boxes, gt, np.array([1]), 0.5, 0.3, best_match=True).labels.tolist() == [1, 0]

    def test_no_ground_truth_is_all_background(self):
        assignment = assign_targets(np.array([[0, 0, 5, 5]], dtype=float), np.zeros((0, 4)), np.zeros(0, dtype=int))
        assert assignment.labels.tolist() == [0]

    def test_matching_proposal_has_zero_regression_target(self):
        gt = np.array([[3.0, 4.0, 20.0, 31.0]])
        assert np.all(encode_boxes(gt, gt) == 0.0)


@pytest.fixture(scope="module")
def detector():
    return MiniDetector(3, DetectorConfig(top_n=8), np.random.default_rng(0))


@pytest.fixture(scope="module")
def image():
    return Tensor(np.random.default_rng(1).uniform(size=(3, 32, 32)))


class TestDetectionLoss:
    def test_target_domain_rejected(self, detector, image):
        annotation = Annotation([BBox(2, 2, 14, 14)], [0])
        out = detector(image, annotation)
        with pytest.raises(ValueError):
            detection_loss(out, annotation, detector.config, TARGET)

    def test_missing_annotation(self, detector, image):
        with pytest.raises(ValueError):
            detection_loss(detector(image), None, detector.config, SOURCE)

    def test_without_ground_truth_only_classification_remains(self, detector, image):
        annotation = Annotation()
        out = detector(image, annotation)
        expected = add(softmax_cross_entropy(out.rpn.logits, np.zeros(len(out.anchors), dtype=int)),
                       softmax_cross_entropy(out.head.logits, np.zeros(len(out.rois), dtype=int)))
        assert detection_loss(out, annotation, detector.config).item() == pytest.approx(expected.item())

    def test_ground_truth_joins_rois(self, detector, image):
        annotation = Annotation([BBox(2, 2, 14, 14), BBox(16, 10, 30, 28)], [0, 2])
        out = detector(image, annotation)
        assert len(out.rois) == len(out.proposals) + 2
        assert len(out.records) == len(out.proposals)
        assert np.array_equal(out.rois[-2:], annotation.box_array())

    def test_loss_is_differentiable(self, detector, image):
        annotation = Annotation([BBox(2, 2, 14, 14)], [1])
        with Tape() as tape:
            loss = detection_loss(detector(image, annotation), annotation, detector.config)
        grads = backward(tape, loss)
        assert math.isfinite(loss.item()) and loss.item() > 0
        assert np.any(grads[detector.head.cls.weight] != 0.0)
        assert np.any(grads[detector.rpn.cls.weight] != 0.0)


class TestDetect:
    def test_detections_are_sorted_and_thresholded(self, detector, image):
        found = detector.detect(image)
        assert len(found) <= detector.config.max_detections
        scores = [d.score for d in found]
        assert scores == sorted(scores, reverse=True)
        assert all(s > detector.config.score_thr for s in scores)
        assert all(0 <= d.label < 3 for d in found)
        for d in found:
            assert 0.0 <= d.box.x1 < d.box.x2 <= 32.0
            assert 0.0 <= d.box.y1 < d.box.y2 <= 32.0


@pytest.mark.slow
def test_overfits_one_image():
    from maf_detector.training import sgd_momentum_step

    rng = np.random.default_rng(0)
    detector = MiniDetector(3, DetectorConfig(top_n=16), rng)
    image = Tensor(rng.uniform(size=(3, 32, 32)))
    annotation = Annotation([BBox(4, 4, 20, 20)], [1])
    params = detector.parameters()
    velocity = [np.zeros(p.shape) for p in params]
    losses = []
    for _ in range(200):
        with Tape() as tape:
            loss = detection_loss(detector(image, annotation), annotation, detector.config)
        grads = backward(tape, loss)
        values, velocity = sgd_momentum_step([p.values for p in params], [grads[p] for p in params],
                                             velocity, 0.001, 0.9)
        for p, v in zip(params, values):
            p.values = v
        losses.append(loss.item())
    assert losses[-1] < 0.7 * losses[0]
