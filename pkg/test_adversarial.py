#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""Reversal layers and the space-to-depth rearrangement."""

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maf_detector.adversarial import (
    ReversalSpec, SrmSpec, grl, srm_forward, srm_inverse, srm_rearrange, wgrl, wgrl_weights,
)
from maf_detector.gradcheck import grad_check
from maf_detector.layers import Conv2d
from maf_detector.tensor import ShapeError, Tape, Tensor, backward, mul, sum_all


def reversed_grad(layer, x_values, upstream):
    x = Tensor(x_values, requires_grad=True)
    with Tape() as tape:
        loss = sum_all(mul(layer(x), Tensor(upstream)))
    return backward(tape, loss)[x]


class TestGrl:
    def test_forward_is_identity(self):
        x = Tensor([[1.0, -2.0], [3.5, 0.0]])
        assert np.array_equal(grl(x, 0.7).values, x.values)

    def test_backward_negates(self):
        grad = reversed_grad(lambda x: grl(x, 1.0), [0.3, 0.4], [2.0, -3.0])
        assert grad.tolist() == [-2.0, 3.0]

    def test_lambda_zero_blocks_gradient(self):
        grad = reversed_grad(lambda x: grl(x, 0.0), [0.3, 0.4], [2.0, -3.0])
        assert np.all(grad == 0.0)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            grl(Tensor([1.0]), -0.1)

    def test_reversal_spec_validates(self):
        with pytest.raises(ValueError):
            ReversalSpec(lam=-1.0)
        with pytest.raises(ValueError):
            ReversalSpec(mode="inverted")


class TestWgrl:
    @pytest.mark.parametrize("p, d, lam, expected", [
        (0.9, 1, 0.5, -0.45),
        (0.5, 0, 1.0, -0.5),
        (1.0, 0, 1.0, 0.0),
        (0.2, 0, 1.0, -0.8),
    ])
    def test_backward_scale(self, p, d, lam, expected):
        grad = reversed_grad(lambda x: wgrl(x, lam, [p], d), [[0.1, 0.2]], [[1.0, 1.0]])
        assert grad.ravel().tolist() == pytest.approx([expected, expected])

    def test_weights(self):
        assert wgrl_weights([0.9, 0.2], 1).tolist() == pytest.approx([0.9, 0.2])
        assert wgrl_weights([0.9, 0.2], 0).tolist() == pytest.approx([0.1, 0.8])

    def test_forward_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(3, 2))
        assert np.array_equal(wgrl(x, 1.0, [0.1, 0.5, 0.9], 1).values, x.values)

    def test_unit_weights_equal_grl(self):
        rng = np.random.default_rng(1)
        values, upstream = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        weighted = reversed_grad(lambda x: wgrl(x, 0.5, np.ones(4), 1), values, upstream)
        plain = reversed_grad(lambda x: grl(x, 0.5), values, upstream)
        assert np.array_equal(weighted, plain)

    def test_rows_scale_independently(self):
        rng = np.random.default_rng(2)
        values, upstream = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        p = np.array([0.1, 0.6, 0.95])
        weighted = reversed_grad(lambda x: wgrl(x, 2.0, p, 0), values, upstream)
        expected = upstream * (-2.0 * wgrl_weights(p, 0)).reshape(3, 1)
        assert np.array_equal(weighted, expected)

    @pytest.mark.parametrize("p", [-0.1, 1.5, float("nan")])
    def test_probability_out_of_range(self, p):
        with pytest.raises(ValueError):
            wgrl(Tensor([[1.0]]), 1.0, [p], 1)

    def test_probability_count_mismatch(self):
        with pytest.raises(ShapeError):
            wgrl(Tensor(np.ones((2, 3))), 1.0, [0.5], 1)

    def test_bad_domain_label(self):
        with pytest.raises(ValueError):
            wgrl(Tensor([[1.0]]), 1.0, [0.5], 2)


def srm_reference(values, s):
    c, h, w = values.shape
    out = np.empty((c * s * s, h // s, w // s))
    for ch in range(c * s * s):
        r = ch % (s * s)
        for u in range(h // s):
            for v in range(w // s):
                out[ch, u, v] = values[ch // (s * s), u * s + r % s, v * s + r // s]
    return out


class TestSrm:
    def test_s1_is_identity(self):
        x = Tensor(np.arange(12.0).reshape(3, 2, 2))
        assert np.array_equal(srm_rearrange(x, 1).values, x.values)

    def test_two_by_two_order(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        out = srm_rearrange(Tensor([[[a, b], [c, d]]]), 2).values
        assert out.reshape(-1).tolist() == [a, c, b, d]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
           st.integers(0, 2 ** 32 - 1))
    def test_matches_index_formula(self, s, c, hs, ws, seed):
        values = np.random.default_rng(seed).normal(size=(c, hs * s, ws * s))
        out = srm_rearrange(Tensor(values), s).values
        assert out.shape == (c * s * s, hs, ws)
        assert np.array_equal(out, srm_reference(values, s))
        assert np.array_equal(srm_inverse(out, s), values)

    def test_preserves_multiset(self):
        values = np.random.default_rng(3).integers(0, 5, size=(2, 4, 6)).astype(float)
        out = srm_rearrange(Tensor(values), 2).values
        assert Counter(out.reshape(-1).tolist()) == Counter(values.reshape(-1).tolist())

    @given(st.integers(0, 10 ** 6), st.integers(1, 8))
    def test_channel_offsets_reduce(self, c, s):
        assert (c % (s * s)) % s == c % s

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            srm_rearrange(Tensor(np.ones((2, 3, 4))), 2)

    def test_spec_check(self):
        with pytest.raises(ShapeError):
            SrmSpec(2, 4).check((8, 5, 4))
        with pytest.raises(ValueError):
            SrmSpec(0, 4)

    def test_gradient_is_a_permutation(self):
        x = Tensor(np.random.default_rng(5).uniform(-1, 1, size=(3, 4, 6)), requires_grad=True)
        result = grad_check(lambda t: srm_rearrange(t, 2), [x])
        assert result.max_rel_err < 1e-8

    def test_forward_through_identity_reduction(self):
        rng = np.random.default_rng(6)
        conv = Conv2d(4, 4, 1, rng)
        conv.weight.values = np.eye(4).reshape(4, 4, 1, 1)
        values = rng.normal(size=(4, 4, 6))
        out = srm_forward(Tensor(values), SrmSpec(2, 4), conv)
        assert out.shape == (16, 2, 3)
        assert out.size == values.size
        assert np.array_equal(out.values, srm_reference(values, 2))

    def test_forward_channel_mismatch(self):
        conv = Conv2d(4, 3, 1, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            srm_forward(Tensor(np.ones((4, 4, 4))), SrmSpec(2, 4), conv)
