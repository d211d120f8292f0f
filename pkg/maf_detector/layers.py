#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Parameterised layers
====================
Small containers that own parameter tensors and expose them by dotted name,
so the optimizer and the checkpoint writer see one flat, ordered list.
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Tuple

import numpy as np

from .tensor import Tensor, affine, conv2d


class Module:
    """Base for everything that owns parameters."""

    def own_parameters(self) -> Iterable[Tuple[str, Tensor]]:
        return ()

    def children(self) -> Iterable[Tuple[str, "Module"]]:
        return ()

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        named = [(prefix + name, tensor) for name, tensor in self.own_parameters()]
        for name, child in self.children():
            named.extend(child.named_parameters(f"{prefix}{name}."))
        return named

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.values for name, tensor in self.named_parameters()}


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, pad: int = 0):
        self.stride = stride
        self.pad = pad
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def own_parameters(self):
        return (("weight", self.weight), ("bias", self.bias))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = Tensor(he_normal(rng, (in_features, out_features), in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    def own_parameters(self):
        return (("weight", self.weight), ("bias", self.bias))

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)
