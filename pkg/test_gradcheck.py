#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""The finite-difference checker itself and the gradient suite."""

import json

import numpy as np
import pytest

from maf_detector.gradcheck import SUITE, CaseReport, grad_check, run_suite, smooth_seed
from maf_detector.tensor import Tensor, mul, relu, scale

FAST_CASES = ["add", "mul", "affine", "conv2d_stride2", "relu", "softmax_cross_entropy", "smooth_l1", "concat",
              "grl", "wgrl", "srm_rearrange", "srm_forward"]


def test_linear_map_is_exact():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    result = grad_check(lambda t: scale(t, 3.0), [x])
    assert result.max_rel_err < 1e-7
    assert result.checked == 6


def test_detects_a_wrong_gradient():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    # numeric gradient scaled by 2 disagrees with the tape
    result = grad_check(lambda t: mul(t, t), [x], numeric_scale=[2.0])
    assert result.max_rel_err > 0.4
    assert result.worst is not None and result.worst[0] == 0


def test_max_checks_limits_coordinates():
    x = Tensor(np.ones((4, 5)), requires_grad=True)
    assert grad_check(lambda t: scale(t, 2.0), [x], max_checks=7).checked == 7


def test_smooth_seed_avoids_kinks():
    def build(seed):
        values = np.array([1e-6, 0.5]) if seed < 3 else np.array([0.5, -0.5])
        return relu, [Tensor(values, requires_grad=True)]

    assert smooth_seed(build, margin=1e-4) == 3


def test_smooth_seed_gives_up():
    with pytest.raises(RuntimeError):
        smooth_seed(lambda seed: (relu, [Tensor(np.zeros(2), requires_grad=True)]), tries=3)


def test_case_names_are_unique():
    names = [case.name for case in SUITE]
    assert len(names) == len(set(names))


def test_report_line():
    assert CaseReport("relu", 1e-9, 1e-5, 12, 0).line().startswith("PASS relu")
    assert CaseReport("relu", 1e-3, 1e-5, 12, 0).line().startswith("FAIL")


def test_report_fields_are_json_native():
    report = CaseReport("relu", np.float64(1e-9), 1e-5, 12, 0)
    assert type(report.passed) is bool
    assert json.loads(json.dumps({"passed": report.passed}))["passed"] is True


@pytest.mark.parametrize("name", FAST_CASES)
def test_case_passes(name):
    (report,) = run_suite([name])
    assert report.passed, report.line()


def test_unknown_case():
    with pytest.raises(ValueError, match="softplus"):
        run_suite(["relu", "softplus"])


@pytest.mark.slow
def test_whole_suite_passes():
    reports = run_suite()
    assert len(reports) == len(SUITE)
    failed = [r.line() for r in reports if not r.passed]
    assert not failed
