#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""Optimizer, data order, the training loop and its checkpoints."""

import csv
import json

import numpy as np
import pytest

from maf_detector.config_manager import ConfigError
from maf_detector.synthetic_domains import Dataset
from maf_detector.tensor import ShapeError
from maf_detector.training import (
    LOSS_COLUMNS, LOSSES_FILE, MODEL_FILE, STATE_FILE, VELOCITY_FILE, EpochCycler, LossBreakdown, Trainer,
    load_model, sgd_momentum_step,
)

BARE = {"align.blocks": "", "align.proposal": False}


class TestSgd:
    def test_two_steps(self):
        w, v = [np.array([1.0])], [np.array([0.0])]
        w, v = sgd_momentum_step(w, [np.array([2.0])], v, 0.1, 0.9)
        assert v[0].tolist() == pytest.approx([-0.2])
        assert w[0].tolist() == pytest.approx([0.8])
        w, v = sgd_momentum_step(w, [np.array([2.0])], v, 0.1, 0.9)
        assert v[0].tolist() == pytest.approx([-0.38])
        assert w[0].tolist() == pytest.approx([0.42])

    def test_zero_gradient_zero_velocity_is_a_fixed_point(self):
        w = [np.array([[1.5, -2.0]])]
        new_w, new_v = sgd_momentum_step(w, [np.zeros((1, 2))], [np.zeros((1, 2))], 0.01)
        assert np.array_equal(new_w[0], w[0])
        assert np.all(new_v[0] == 0.0)

    def test_inputs_untouched(self):
        w, g, v = np.ones(3), np.ones(3), np.ones(3)
        sgd_momentum_step([w], [g], [v], 0.5)
        assert w.tolist() == [1.0, 1.0, 1.0] and v.tolist() == [1.0, 1.0, 1.0]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_momentum_step([np.ones(3)], [np.ones(2)], [np.ones(3)], 0.1)
        with pytest.raises(ShapeError):
            sgd_momentum_step([np.ones(3)], [], [np.ones(3)], 0.1)


class TestEpochCycler:
    def test_every_epoch_is_a_permutation(self):
        cycler = EpochCycler(5, 0)
        first = [cycler.next() for _ in range(5)]
        second = [cycler.next() for _ in range(5)]
        assert sorted(first) == sorted(second) == list(range(5))
        assert cycler.epoch == 2

    def test_state_survives_json(self):
        cycler = EpochCycler(7, [3, 1])
        for _ in range(9):
            cycler.next()
        state = json.loads(json.dumps(cycler.state_dict()))
        expected = [cycler.next() for _ in range(12)]
        restored = EpochCycler(7, 0)
        restored.load_state_dict(state)
        assert [restored.next() for _ in range(12)] == expected

    def test_size_mismatch(self):
        state = EpochCycler(3, 0).state_dict()
        with pytest.raises(ValueError):
            EpochCycler(4, 0).load_state_dict(state)

    def test_empty_split(self):
        with pytest.raises(ValueError):
            EpochCycler(0, 0)


def test_loss_row_keeps_full_precision():
    losses = LossBreakdown(0.1, 0.2, 0.3, 0.4, 0.5, 1.4, 0.24)
    row = losses.row(7, 0.001)
    assert row[0] == "7"
    assert [float(v) for v in row[1:]] == [0.1, 0.2, 0.3, 0.4, 0.5, 1.4, 0.24, 0.001]


def run_training(dataset, config, out_dir, **kwargs):
    trainer = Trainer(config.to_run_config(), dataset, out_dir, quiet=True)
    history = trainer.run(**kwargs)
    return trainer, history


def detector_arrays(trainer):
    return [(name, tensor.values) for name, tensor in trainer.model.detector.named_parameters()]


class TestTrainer:
    def test_losses_and_files(self, tiny_dataset, make_config, tmp_path):
        trainer, history = run_training(tiny_dataset, make_config(), tmp_path)
        assert len(history) == 6 and trainer.iteration == 6
        for losses in history:
            assert losses.l_t == pytest.approx(losses.l_p + losses.l_3 + losses.l_4 + losses.l_5, abs=1e-12)
            assert losses.l_maf == pytest.approx(losses.l_det + 0.1 * losses.l_t, abs=1e-12)
            assert np.isfinite(losses.l_maf)
        for name in (MODEL_FILE, VELOCITY_FILE, STATE_FILE, LOSSES_FILE):
            assert (tmp_path / name).exists()
        with open(tmp_path / LOSSES_FILE, newline="") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == LOSS_COLUMNS
        assert [int(r[0]) for r in rows[1:]] == list(range(6))
        assert [float(r[-1]) for r in rows[1:]] == [0.001] * 4 + [0.0001] * 2
        state = json.loads((tmp_path / STATE_FILE).read_text())
        assert state["iteration"] == 6

    def test_identical_runs_write_identical_bytes(self, tiny_dataset, make_config, tmp_path):
        run_training(tiny_dataset, make_config(), tmp_path / "a")
        run_training(tiny_dataset, make_config(), tmp_path / "b")
        for name in (MODEL_FILE, VELOCITY_FILE, LOSSES_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.parametrize("overrides", [{"alpha": 0.0}, {"align.lambda": 0.0}])
    def test_switched_off_alignment_matches_detector_only(self, tiny_dataset, make_config, tmp_path, overrides):
        switched_off, _ = run_training(tiny_dataset, make_config(overrides), tmp_path / "off")
        baseline, _ = run_training(tiny_dataset, make_config(BARE), tmp_path / "bare")
        for (name, a), (_, b) in zip(detector_arrays(switched_off), detector_arrays(baseline)):
            assert np.array_equal(a, b), name

    def test_resume_is_bitwise(self, tiny_dataset, make_config, tmp_path):
        run_training(tiny_dataset, make_config(), tmp_path / "straight")
        _, first = run_training(tiny_dataset, make_config(), tmp_path / "split", stop_after=3)
        assert len(first) == 3
        trainer, second = run_training(tiny_dataset, make_config(), tmp_path / "split", resume=True)
        assert len(second) == 3 and trainer.iteration == 6
        for name in (MODEL_FILE, VELOCITY_FILE, LOSSES_FILE):
            assert (tmp_path / "straight" / name).read_bytes() == (tmp_path / "split" / name).read_bytes()

    def test_resume_refuses_other_config(self, tiny_dataset, make_config, tmp_path):
        run_training(tiny_dataset, make_config(), tmp_path, stop_after=2)
        with pytest.raises(ConfigError):
            run_training(tiny_dataset, make_config({"alpha": 0.5}), tmp_path, resume=True)

    def test_load_model(self, tiny_dataset, make_config, tmp_path):
        config = make_config()
        trainer, _ = run_training(tiny_dataset, config, tmp_path, stop_after=2)
        model = load_model(tmp_path, config.to_run_config(), len(tiny_dataset.classes))
        for (name, a), (_, b) in zip(trainer.model.named_parameters(), model.named_parameters()):
            assert np.array_equal(a.values, b.values), name

    def test_alignment_needs_target_images(self, tiny_dataset, make_config, tmp_path):
        no_target = Dataset(tiny_dataset.source, [], tiny_dataset.val, tiny_dataset.classes)
        with pytest.raises(ValueError):
            Trainer(make_config().to_run_config(), no_target, tmp_path)
        Trainer(make_config(BARE).to_run_config(), no_target, tmp_path)


@pytest.mark.slow
def test_detection_loss_falls(tiny_dataset, make_config, tmp_path):
    config = make_config({"schedule.phase1_iters": 500, "schedule.phase2_iters": 0,
                          "train.checkpoint_every": 500, "train.log_every": 500})
    _, history = run_training(tiny_dataset, config, tmp_path)
    assert len(history) == 500
    early = np.mean([h.l_det for h in history[:100]])
    late = np.mean([h.l_det for h in history[-100:]])
    assert late < early
