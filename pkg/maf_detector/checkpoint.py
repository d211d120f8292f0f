#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Parameter checkpoints
=====================
Portable binary layout:

    b"MAFCKPT1"
    repeated until end of file:
        u64 name length, UTF-8 name,
        u64 rank, rank x u64 dims,
        prod(dims) x f64 values

All integers and floats are little-endian.
"""

from __future__ import annotations

import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, Tuple, Union

import numpy as np

from .layers import Module

logger = logging.getLogger(__name__)

MAGIC = b"MAFCKPT1"
_U64 = struct.Struct("<Q")


class CheckpointError(OSError):
    """Unreadable or incompatible checkpoint"""


def save_checkpoint(path: Union[str, Path], named_arrays: Iterable[Tuple[str, np.ndarray]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC]
    for name, values in named_arrays:
        values = np.asarray(values, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(_U64.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U64.pack(values.ndim))
        chunks.extend(_U64.pack(dim) for dim in values.shape)
        chunks.append(values.astype("<f8").tobytes(order="C"))
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")

    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = len(MAGIC)

    def read_u64() -> int:
        nonlocal offset
        if offset + 8 > len(data):
            raise CheckpointError(f"{path} is truncated at byte {offset}")
        (value,) = _U64.unpack_from(data, offset)
        offset += 8
        return value

    while offset < len(data):
        name_len = read_u64()
        if offset + name_len > len(data):
            raise CheckpointError(f"{path} is truncated inside a parameter name")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rank = read_u64()
        shape = tuple(read_u64() for _ in range(rank))
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path} is truncated inside parameter {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    return arrays


def save_module(path: Union[str, Path], module: Module) -> Path:
    return save_checkpoint(path, ((name, tensor.values) for name, tensor in module.named_parameters()))


def load_into(module: Module, arrays: Dict[str, np.ndarray], source: str = "checkpoint") -> None:
    """Copy stored values into the module's parameters, checking names and shapes."""
    for name, tensor in module.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"{source} has no parameter {name!r}")
        if arrays[name].shape != tensor.shape:
            raise CheckpointError(f"{source}: parameter {name!r} has shape {arrays[name].shape}, "
                                  f"model expects {tensor.shape}")
        tensor.values = np.array(arrays[name], dtype=np.float64)
    logger.debug("Loaded %d parameters from %s", len(arrays), source)
