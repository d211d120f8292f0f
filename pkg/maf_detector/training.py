#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Minimax training loop
=====================
One iteration = one source image + one target image on a fresh tape, a single
backward pass through the reversal layers and one SGD-with-momentum step.

Run directory:

    losses.csv          iter,l_det,l_3,l_4,l_5,l_p,l_t,l_maf,lr
    model.ckpt          parameters
    velocity.ckpt       momentum buffers, same names as the parameters
    train_state.json    iteration, data-order state, config hash
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import psutil
from tqdm import tqdm

from .checkpoint import load_checkpoint, load_into, save_checkpoint, save_module
from .config_manager import ConfigError, RunConfig
from .models.maf import MafModel
from .synthetic_domains import Dataset, DomainSample
from .tensor import ShapeError, Tape, Tensor, backward, set_finite_checks

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("iter", "l_det", "l_3", "l_4", "l_5", "l_p", "l_t", "l_maf", "lr")
MODEL_FILE = "model.ckpt"
VELOCITY_FILE = "velocity.ckpt"
STATE_FILE = "train_state.json"
LOSSES_FILE = "losses.csv"


@dataclass
class LossBreakdown:
    l_det: float
    l_3: float
    l_4: float
    l_5: float
    l_p: float
    l_t: float
    l_maf: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def row(self, iteration: int, lr: float) -> List[str]:
        values = [self.l_det, self.l_3, self.l_4, self.l_5, self.l_p, self.l_t, self.l_maf, lr]
        return [str(iteration)] + [repr(float(v)) for v in values]


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
                      lr: float, momentum: float = 0.9) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """v <- momentum*v - lr*g; w <- w + v. Returns new arrays, inputs are untouched."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError(f"sgd: {len(params)} params, {len(grads)} grads, {len(velocity)} velocities")
    new_params, new_velocity = [], []
    for w, g, v in zip(params, grads, velocity):
        if not (np.shape(w) == np.shape(g) == np.shape(v)):
            raise ShapeError(f"sgd: shapes {np.shape(w)}, {np.shape(g)}, {np.shape(v)} differ")
        v = momentum * np.asarray(v) - lr * np.asarray(g)
        new_velocity.append(v)
        new_params.append(np.asarray(w) + v)
    return new_params, new_velocity


class EpochCycler:
    """Visits 0..n-1 in a fresh shuffled order every epoch."""

    def __init__(self, n: int, seed):
        if n < 1:
            raise ValueError("cannot cycle over an empty split")
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.order: List[int] = []
        self.position = 0
        self.epoch = 0

    def next(self) -> int:
        if self.position >= len(self.order):
            self.order = [int(i) for i in self.rng.permutation(self.n)]
            self.position = 0
            self.epoch += 1
        index = self.order[self.position]
        self.position += 1
        return index

    def state_dict(self) -> Dict:
        return {"n": self.n, "rng": self.rng.bit_generator.state, "order": list(self.order),
                "position": self.position, "epoch": self.epoch}

    def load_state_dict(self, state: Dict) -> None:
        if state["n"] != self.n:
            raise ValueError(f"data-order state is for {state['n']} samples, split has {self.n}")
        self.rng.bit_generator.state = state["rng"]
        self.order = [int(i) for i in state["order"]]
        self.position = int(state["position"])
        self.epoch = int(state["epoch"])


def make_cyclers(cfg: RunConfig, dataset: Dataset) -> Tuple[EpochCycler, Optional[EpochCycler]]:
    source_seed, target_seed = np.random.SeedSequence(cfg.seed.data).spawn(2)
    source = EpochCycler(len(dataset.source), source_seed)
    target = EpochCycler(len(dataset.target), target_seed) if dataset.target else None
    return source, target


def train_step(model: MafModel, source: DomainSample, target: Optional[DomainSample],
               velocity: List[np.ndarray], lr: float) -> Tuple[LossBreakdown, List[np.ndarray]]:
    """Forward both images on one tape, backpropagate L_MAF once and update every parameter."""
    if source.annotation is None:
        raise ValueError(f"source sample {source.file!r} has no annotation")
    target_image = Tensor(target.image) if target is not None else None
    with Tape() as tape:
        terms = model.loss_terms(Tensor(source.image), source.annotation, target_image)
    grads = backward(tape, terms.l_maf)

    params = model.parameters()
    new_values, velocity = sgd_momentum_step([p.values for p in params], [grads[p] for p in params],
                                             velocity, lr, model.config.momentum)
    for param, values in zip(params, new_values):
        param.values = values
    losses = LossBreakdown(*(t.item() for t in (terms.l_det, terms.l_3, terms.l_4, terms.l_5,
                                                terms.l_p, terms.l_t, terms.l_maf)))
    return losses, velocity


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Dataset, out_dir: Union[str, Path], quiet: bool = False):
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.quiet = quiet
        if not dataset.source:
            raise ValueError("training needs at least one source image")
        size = dataset.source[0].image.shape[-1]
        if size != cfg.data.image_size:
            raise ConfigError(f"dataset images are {size} px but data.image_size is {cfg.data.image_size}")
        if cfg.align.enabled and not dataset.target:
            raise ValueError("alignment is enabled but the dataset has no target images")
        self.model = MafModel(len(dataset.classes), cfg)
        self.velocity = [np.zeros(p.shape) for p in self.model.parameters()]
        self.source_order, self.target_order = make_cyclers(cfg, dataset)
        self.iteration = 0
        self.process = psutil.Process()

    # checkpoints ------------------------------------------------------------

    def save(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_module(self.out_dir / MODEL_FILE, self.model)
        names = [name for name, _ in self.model.named_parameters()]
        save_checkpoint(self.out_dir / VELOCITY_FILE, zip(names, self.velocity))
        state = {
            "iteration": self.iteration,
            "config_hash": self.cfg.config_hash(),
            "source_order": self.source_order.state_dict(),
            "target_order": self.target_order.state_dict() if self.target_order else None,
        }
        (self.out_dir / STATE_FILE).write_text(json.dumps(state, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        logger.debug(f"Checkpoint written at iteration {self.iteration}")

    def restore(self) -> None:
        state_path = self.out_dir / STATE_FILE
        state = json.loads(state_path.read_text(encoding="utf-8"))
        if state["config_hash"] != self.cfg.config_hash():
            raise ConfigError(f"{state_path} was written with a different configuration")
        load_into(self.model, load_checkpoint(self.out_dir / MODEL_FILE), str(self.out_dir / MODEL_FILE))
        stored = load_checkpoint(self.out_dir / VELOCITY_FILE)
        names = [name for name, _ in self.model.named_parameters()]
        missing = [n for n in names if n not in stored]
        if missing:
            raise ConfigError(f"{self.out_dir / VELOCITY_FILE} lacks momentum for {missing[0]!r}")
        self.velocity = [np.array(stored[n]) for n in names]
        self.source_order.load_state_dict(state["source_order"])
        if self.target_order is not None and state["target_order"] is not None:
            self.target_order.load_state_dict(state["target_order"])
        self.iteration = int(state["iteration"])
        logger.info(f"Resumed from iteration {self.iteration} in {self.out_dir}")

    def _open_losses(self, resume: bool):
        path = self.out_dir / LOSSES_FILE
        kept: List[List[str]] = []
        if resume and path.exists():
            with open(path, newline="", encoding="utf-8") as f:
                kept = [row for row in list(csv.reader(f))[1:] if row and int(row[0]) < self.iteration]
        handle = open(path, "w", newline="", encoding="utf-8")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        writer.writerows(kept)
        return handle, writer

    # loop -------------------------------------------------------------------

    def run(self, resume: bool = False, stop_after: Optional[int] = None) -> List[LossBreakdown]:
        """Train to the end of the schedule (or stop_after iterations in total)."""
        set_finite_checks(self.cfg.debug.check_finite)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if resume:
            self.restore()
        total = self.cfg.schedule.total_iters
        end = total if stop_after is None else min(total, stop_after)
        history: List[LossBreakdown] = []
        handle, writer = self._open_losses(resume)
        try:
            progress = tqdm(range(self.iteration, end), desc="Training", unit="it",
                            initial=self.iteration, total=end, disable=self.quiet)
            for i in progress:
                source = self.dataset.source[self.source_order.next()]
                target = None
                if self.cfg.align.enabled:
                    target = self.dataset.target[self.target_order.next()]
                lr = self.cfg.schedule.lr_at(i)
                losses, self.velocity = train_step(self.model, source, target, self.velocity, lr)
                writer.writerow(losses.row(i, lr))
                history.append(losses)
                self.iteration = i + 1
                if not np.isfinite(losses.l_maf):
                    raise FloatingPointError(f"L_MAF became {losses.l_maf} at iteration {i}")
                if self.iteration % self.cfg.train.log_every == 0:
                    rss = self.process.memory_info().rss / (1024 * 1024)
                    logger.info(f"iter {self.iteration}: l_det={losses.l_det:.4f} l_t={losses.l_t:.4f} "
                                f"l_maf={losses.l_maf:.4f} lr={lr:g} rss={rss:.1f} MiB")
                    handle.flush()
                if self.iteration % self.cfg.train.checkpoint_every == 0:
                    self.save()
                progress.set_postfix(l_det=f"{losses.l_det:.3f}", l_t=f"{losses.l_t:.3f}")
        finally:
            handle.close()
        self.save()
        logger.info(f"Training stopped at iteration {self.iteration} of {total}")
        return history


def train(cfg: RunConfig, dataset: Dataset, out_dir: Union[str, Path], resume: bool = False,
          stop_after: Optional[int] = None, quiet: bool = False) -> MafModel:
    trainer = Trainer(cfg, dataset, out_dir, quiet=quiet)
    trainer.run(resume=resume, stop_after=stop_after)
    return trainer.model


def load_model(run_dir: Union[str, Path], cfg: RunConfig, num_classes: int) -> MafModel:
    model = MafModel(num_classes, cfg)
    path = Path(run_dir) / MODEL_FILE
    load_into(model, load_checkpoint(path), str(path))
    return model
