#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Synthetic source and target domains
===================================
Labelled shape scenes form the source domain; the same generator followed by
a domain shift (fog or a camera colour cast) forms the unlabelled target.
A labelled, shifted validation split is kept for evaluation only.

Dataset directory:

    manifest.json
    annotations.jsonl           one record per training image
    images/source_00000.ppm
    images/target_00000.ppm
    val/annotations.jsonl
    val/images/target_00000.ppm
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import __version__
from .models.boxes import Annotation, BBox, iou
from .tensor import Tensor

logger = logging.getLogger(__name__)

CLASS_NAMES = ("disc", "square", "triangle")
SHIFT_KINDS = ("fog", "camera")

SOURCE_STREAM = 0
TARGET_STREAM = 1
VAL_STREAM = 2
SHIFT_STREAM = 7

SOURCE = 1
TARGET = 0


class DatasetError(OSError):
    """Missing or corrupt dataset file"""


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 96
    classes: Tuple[str, ...] = CLASS_NAMES
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 16
    max_size: int = 40
    max_iou: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 16 or self.image_size % 16:
            raise ValueError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        unknown = [c for c in self.classes if c not in CLASS_NAMES]
        if not self.classes or unknown:
            raise ValueError(f"classes must be a non-empty subset of {CLASS_NAMES}, got {self.classes}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError(f"need 1 <= min_objects <= max_objects, got {self.min_objects}, {self.max_objects}")
        if not 1 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError(f"need 1 <= min_size <= max_size <= image_size, got {self.min_size}, {self.max_size}")


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "fog"
    fog_alpha: float = 0.45
    blur_radius: int = 1
    brightness_jitter: float = 0.1
    color_gain: Tuple[float, float, float] = (1.15, 1.0, 0.8)
    noise_std: float = 0.03

    def validate(self) -> None:
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"shift kind must be one of {SHIFT_KINDS}, got {self.kind!r}")
        if not 0.3 <= self.fog_alpha <= 0.6:
            raise ValueError(f"fog_alpha must lie in [0.3, 0.6], got {self.fog_alpha}")
        if self.blur_radius not in (1, 2):
            raise ValueError(f"blur_radius must be 1 or 2, got {self.blur_radius}")
        if not 0 <= self.brightness_jitter <= 0.1:
            raise ValueError(f"brightness_jitter must lie in [0, 0.1], got {self.brightness_jitter}")
        if len(self.color_gain) != 3 or any(g <= 0 for g in self.color_gain):
            raise ValueError(f"color_gain must be three positive gains, got {self.color_gain}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass
class DomainSample:
    image: np.ndarray                      # [3, H, W] in [0, 1]
    domain: int                            # 1 source, 0 target
    annotation: Optional[Annotation] = None
    file: str = ""

    def tensor(self) -> Tensor:
        return Tensor(self.image)


@dataclass
class Dataset:
    source: List[DomainSample]
    target: List[DomainSample]
    val: List[DomainSample]
    classes: Tuple[str, ...]
    manifest: Dict = field(default_factory=dict)


###############################################################################
# Scene generation                                                            #
###############################################################################

def _shape_mask(kind: str, x0: int, y0: int, size: int, image_size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    px, py = xs + 0.5, ys + 0.5
    if kind == "square":
        return (px >= x0) & (px < x0 + size) & (py >= y0) & (py < y0 + size)
    if kind == "disc":
        r = size / 2.0
        return (px - (x0 + r)) ** 2 + (py - (y0 + r)) ** 2 <= r * r
    # apex up, base along the bottom edge
    apex_x, base_y = x0 + size / 2.0, y0 + size
    t = (py - y0) / size
    return (py >= y0) & (py <= base_y) & (np.abs(px - apex_x) <= t * size / 2.0)


def _tight_box(mask: np.ndarray) -> BBox:
    ys, xs = np.nonzero(mask)
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.7, size=(3, 1, 1))
    gx = rng.uniform(-0.2, 0.2, size=(3, 1, 1))
    gy = rng.uniform(-0.2, 0.2, size=(3, 1, 1))
    ramp = np.linspace(0.0, 1.0, size)
    image = base + gx * ramp[None, None, :] + gy * ramp[None, :, None]
    return image + rng.normal(0.0, 0.02, size=(3, size, size))


def render_scene(spec: SceneSpec, index: int,
                 stream: int = SOURCE_STREAM) -> Tuple[np.ndarray, Annotation, List[np.ndarray]]:
    """Image, annotation and the full mask of every placed shape."""
    rng = np.random.default_rng([spec.seed, stream, index])
    n = spec.image_size
    image = _background(rng, n)
    wanted = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    boxes: List[BBox] = []
    labels: List[int] = []
    masks: List[np.ndarray] = []
    for _ in range(wanted):
        for _attempt in range(100):
            label = int(rng.integers(len(spec.classes)))
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            x0 = int(rng.integers(0, n - size + 1))
            y0 = int(rng.integers(0, n - size + 1))
            mask = _shape_mask(spec.classes[label], x0, y0, size, n)
            box = _tight_box(mask)
            if all(iou(box, other) < spec.max_iou for other in boxes):
                break
        else:
            continue
        color = rng.uniform(0.0, 1.0, size=3)
        image[:, mask] = color[:, None]
        boxes.append(box)
        labels.append(label)
        masks.append(mask)
    return np.clip(image, 0.0, 1.0), Annotation(boxes, labels), masks


def generate_scene(spec: SceneSpec, index: int, stream: int = SOURCE_STREAM) -> Tuple[Tensor, Annotation]:
    image, annotation, _ = render_scene(spec, index, stream)
    return Tensor(image), annotation


def _box_blur(image: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return image
    k = 2 * radius + 1
    padded = np.pad(image, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    return windows.mean(axis=(-2, -1))


def apply_domain_shift(image: np.ndarray, shift: ShiftSpec, seed) -> np.ndarray:
    """Fog: blur, blend toward white, jitter brightness. Camera: colour gain, jitter, sensor noise."""
    rng = np.random.default_rng(seed)
    image = np.asarray(image, dtype=np.float64)
    jitter = 1.0 + rng.uniform(-shift.brightness_jitter, shift.brightness_jitter)
    if shift.kind == "camera":
        gain = np.asarray(shift.color_gain, dtype=np.float64)[:, None, None]
        out = image * gain * jitter + rng.normal(0.0, shift.noise_std, size=image.shape)
    else:
        out = (_box_blur(image, shift.blur_radius) * (1.0 - shift.fog_alpha) + shift.fog_alpha) * jitter
    return np.clip(out, 0.0, 1.0)


###############################################################################
# PPM and JSONL                                                               #
###############################################################################

def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: Union[str, Path], image: np.ndarray) -> None:
    pixels = quantize(image).transpose(1, 2, 0)
    h, w, _ = pixels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    tokens: List[bytes] = []
    offset = 0
    while len(tokens) < 4:
        while offset < len(data) and data[offset:offset + 1].isspace():
            offset += 1
        if data[offset:offset + 1] == b"#":
            offset = data.find(b"\n", offset) + 1 or len(data)
            continue
        end = offset
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == offset:
            raise DatasetError(f"{path}: truncated PPM header")
        tokens.append(data[offset:end])
        offset = end
    offset += 1
    try:
        magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DatasetError(f"{path}: malformed PPM header") from None
    if magic != b"P6" or maxval != 255:
        raise DatasetError(f"{path}: expected an 8-bit P6 image, got {magic!r} with maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=offset)
    if pixels.size != width * height * 3:
        raise DatasetError(f"{path}: expected {width * height * 3} pixel bytes, found {pixels.size}")
    return pixels.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def _record(file: str, domain: int, annotation: Optional[Annotation]) -> Dict:
    boxes = [b.as_list() for b in annotation.boxes] if annotation is not None else []
    labels = list(annotation.labels) if annotation is not None else []
    return {"file": file, "domain": "source" if domain == SOURCE else "target", "boxes": boxes, "labels": labels}


def _write_jsonl(path: Path, records: Sequence[Dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")


###############################################################################
# Dataset                                                                     #
###############################################################################

def write_dataset(directory: Union[str, Path], n_source: int = 200, n_target: int = 200,
                  scene: SceneSpec = SceneSpec(), shift: ShiftSpec = ShiftSpec(), n_val: int = 100,
                  reverse: bool = False, quiet: bool = True) -> Dict:
    """Write the training images, the validation split and manifest.json.

    With reverse the shifted images form the labelled source and clean images
    form the target.
    """
    if n_source < 1:
        raise ValueError("n_source must be >= 1: the source domain must be labelled and non-empty")
    if n_target < 0 or n_val < 0:
        raise ValueError("n_target and n_val must be >= 0")
    scene.validate()
    shift.validate()
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "val" / "images").mkdir(parents=True, exist_ok=True)

    def render(stream: int, index: int, shifted: bool) -> Tuple[np.ndarray, Annotation]:
        image, annotation, _ = render_scene(scene, index, stream)
        if shifted:
            image = apply_domain_shift(image, shift, [scene.seed, SHIFT_STREAM, stream, index])
        return image, annotation

    records: List[Dict] = []
    jobs = [(SOURCE_STREAM, SOURCE, i) for i in range(n_source)] + [(TARGET_STREAM, TARGET, i) for i in range(n_target)]
    for stream, domain, index in tqdm(jobs, desc="Generating", unit="img", disable=quiet):
        shifted = (domain == TARGET) != reverse
        image, annotation = render(stream, index, shifted)
        name = f"images/{'source' if domain == SOURCE else 'target'}_{index:05d}.ppm"
        write_ppm(directory / name, image)
        records.append(_record(name, domain, annotation if domain == SOURCE else None))
    _write_jsonl(directory / "annotations.jsonl", records)

    val_records = []
    for index in tqdm(range(n_val), desc="Validation", unit="img", disable=quiet):
        image, annotation = render(VAL_STREAM, index, not reverse)
        name = f"images/target_{index:05d}.ppm"
        write_ppm(directory / "val" / name, image)
        val_records.append(_record(name, TARGET, annotation))
    _write_jsonl(directory / "val" / "annotations.jsonl", val_records)

    manifest = {
        "tool": "maf-detector",
        "version": __version__,
        "classes": list(scene.classes),
        "scene": asdict(scene),
        "shift": asdict(shift),
        "n_source": n_source,
        "n_target": n_target,
        "n_val": n_val,
        "reverse": reverse,
        "streams": {"source": SOURCE_STREAM, "target": TARGET_STREAM, "val": VAL_STREAM, "shift": SHIFT_STREAM},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {n_source} source, {n_target} target and {n_val} validation images to {directory}")
    return manifest


def _read_split(directory: Path, num_classes: int) -> List[DomainSample]:
    path = directory / "annotations.jsonl"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    samples = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            domain = SOURCE if record["domain"] == "source" else TARGET
            boxes = [BBox(*map(float, b)) for b in record["boxes"]]
            labels = [int(v) for v in record["labels"]]
            annotation = Annotation(boxes, labels)
            file = record["file"]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"{path}:{lineno}: corrupt record: {e}") from None
        if any(not 0 <= label < num_classes for label in labels):
            raise DatasetError(f"{path}:{lineno}: label out of range for {num_classes} classes")
        if domain == TARGET and not boxes:
            annotation = None
        samples.append(DomainSample(read_ppm(directory / file), domain, annotation, file))
    return samples


def read_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        classes = tuple(manifest["classes"])
    except OSError as e:
        raise DatasetError(f"cannot read {manifest_path}: {e}") from e
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"{manifest_path}: corrupt manifest: {e}") from None
    train = _read_split(directory, len(classes))
    val_dir = directory / "val"
    val = _read_split(val_dir, len(classes)) if (val_dir / "annotations.jsonl").exists() else []
    dataset = Dataset(
        source=[s for s in train if s.domain == SOURCE],
        target=[s for s in train if s.domain == TARGET],
        val=val,
        classes=classes,
        manifest=manifest,
    )
    logger.info(f"Read {len(dataset.source)} source, {len(dataset.target)} target and "
                f"{len(dataset.val)} validation images from {directory}")
    return dataset
