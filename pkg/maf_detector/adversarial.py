#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gradient-manipulating layers
============================
GRL      identity forward, upstream gradient times -lambda backward.
WGRL     GRL whose backward scale is weighted per row by the domain
         classifier's confidence in the row's true domain.
SRM      1x1 channel reduction followed by a lossless space-to-depth
         rearrangement of s x s neighbourhoods.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .layers import Conv2d
from .tensor import ShapeError, Tensor, apply_op

MODES = ("plain", "weighted")


@dataclass(frozen=True)
class ReversalSpec:
    lam: float = 1.0
    mode: str = "plain"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"reversal lambda must be >= 0, got {self.lam}")
        if self.mode not in MODES:
            raise ValueError(f"reversal mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class SrmSpec:
    s: int = 2
    out_channels: int = 32

    def __post_init__(self):
        if self.s < 1:
            raise ValueError(f"SRM sampling factor must be >= 1, got {self.s}")
        if self.out_channels < 1:
            raise ValueError(f"SRM out_channels must be >= 1, got {self.out_channels}")

    def check(self, shape) -> None:
        if len(shape) != 3 or shape[1] % self.s or shape[2] % self.s:
            raise ShapeError(f"SRM: feature map {tuple(shape)} is not divisible by s={self.s}")


def grl(x: Tensor, lam: float = 1.0) -> Tensor:
    if lam < 0:
        raise ValueError(f"reversal lambda must be >= 0, got {lam}")
    factor = -float(lam)
    return apply_op("grl", (x,), x.values, lambda g: (g * factor,))


def wgrl_weights(p, d) -> np.ndarray:
    """d*p + (1-d)*(1-p), per row."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    d = np.asarray(d, dtype=np.float64)
    return d * p + (1.0 - d) * (1.0 - p)


def wgrl(x: Tensor, lam: float, p, d: Union[int, np.ndarray]) -> Tensor:
    """Weighted reversal. p is the detached source probability per row of x."""
    if lam < 0:
        raise ValueError(f"reversal lambda must be >= 0, got {lam}")
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if x.values.ndim == 0 or p.shape[0] != x.shape[0]:
        raise ShapeError(f"wgrl: {p.shape[0]} probabilities for input of shape {x.shape}")
    if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
        raise ValueError(f"wgrl: probabilities must lie in [0, 1], got {p.tolist()}")
    d_arr = np.asarray(d)
    if not np.all((d_arr == 0) | (d_arr == 1)):
        raise ValueError(f"wgrl: domain label must be 0 or 1, got {d_arr.tolist()}")
    coeff = (-float(lam) * wgrl_weights(p, d_arr)).reshape((x.shape[0],) + (1,) * (x.values.ndim - 1))
    return apply_op("wgrl", (x,), x.values, lambda g: (g * coeff,))


def _space_to_depth(values: np.ndarray, s: int) -> np.ndarray:
    c, h, w = values.shape
    # (c0, u, du, v, dv) -> (c0, dv, du, u, v): channel c = c0*s^2 + dv*s + du
    return values.reshape(c, h // s, s, w // s, s).transpose(0, 4, 2, 1, 3).reshape(c * s * s, h // s, w // s)


def _depth_to_space(values: np.ndarray, s: int) -> np.ndarray:
    cs, hs, ws = values.shape
    c = cs // (s * s)
    return values.reshape(c, s, s, hs, ws).transpose(0, 3, 2, 4, 1).reshape(c, hs * s, ws * s)


def srm_rearrange(x: Tensor, s: int) -> Tensor:
    """F_S(u, v, c) = F_L(u*s + (c mod s^2) mod s, v*s + (c mod s^2) // s, c // s^2)."""
    if s < 1:
        raise ValueError(f"SRM sampling factor must be >= 1, got {s}")
    if x.values.ndim != 3 or x.shape[1] % s or x.shape[2] % s:
        raise ShapeError(f"srm_rearrange: spatial dims of {x.shape} not divisible by s={s}")
    return apply_op("srm_rearrange", (x,), _space_to_depth(x.values, s),
                    lambda g: (_depth_to_space(g, s),))


def srm_inverse(values: np.ndarray, s: int) -> np.ndarray:
    """Undo srm_rearrange on a plain array."""
    return _depth_to_space(np.asarray(values, dtype=np.float64), s)


def srm_forward(features: Tensor, spec: SrmSpec, conv: Conv2d) -> Tensor:
    spec.check(features.shape)
    if conv.out_channels != spec.out_channels:
        raise ShapeError(f"SRM conv produces {conv.out_channels} channels, spec expects {spec.out_channels}")
    return srm_rearrange(conv(features), spec.s)
