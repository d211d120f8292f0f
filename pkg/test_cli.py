#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""End-to-end runs of the maf-detector command line."""

import csv
import json
import shutil

import pytest

from maf_detector.app import EXIT_IO, EXIT_USAGE, main
from maf_detector.evaluation import SWEEP_THRESHOLDS

SMALL = ["--set", "data.image_size=32"]
SHORT_RUN = SMALL + ["--set", "schedule.phase1_iters=2", "--set", "schedule.phase2_iters=1",
                     "--set", "train.checkpoint_every=2", "--set", "detector.top_n=8"]


def gen_data(out, *extra):
    return main(["gen-data", "--out", str(out), "--n-source", "2", "--n-target", "2", "--n-val", "2",
                 "--seed", "4", "--quiet", *SMALL, *extra])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert gen_data(root / "data") == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--quiet", *SHORT_RUN]) == 0
    return root


class TestGenData:
    def test_same_seed_same_manifest(self, tmp_path):
        assert gen_data(tmp_path / "a") == 0
        assert gen_data(tmp_path / "b") == 0
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
        record = json.loads((tmp_path / "a" / "run.json").read_text())
        assert record["command"] == "gen-data" and record["tool"] == "maf-detector"

    def test_empty_source_is_a_usage_error(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--n-source", "0", "--quiet"]) == EXIT_USAGE

    def test_class_subset(self, tmp_path):
        assert gen_data(tmp_path, "--classes", "disc,square") == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["classes"] == ["disc", "square"]


class TestErrors:
    def test_missing_required_argument(self):
        with pytest.raises(SystemExit) as info:
            main(["train", "--out", "x"])
        assert info.value.code == EXIT_USAGE

    def test_unknown_variant(self):
        with pytest.raises(SystemExit) as info:
            main(["train", "--data", "d", "--out", "x", "--variant", "everything"])
        assert info.value.code == EXIT_USAGE

    def test_unknown_set_key(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--set", "align.lamda=1", "--quiet"]) == EXIT_USAGE

    def test_set_without_equals(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--set", "alpha", "--quiet"]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--config", str(tmp_path / "nope.conf"),
                     "--quiet"]) == EXIT_IO

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "run"),
                     "--quiet"]) == EXIT_IO

    def test_image_size_mismatch(self, trained, tmp_path):
        assert main(["train", "--data", str(trained / "data"), "--out", str(tmp_path), "--quiet"]) == EXIT_USAGE


class TestRun:
    def test_train_outputs(self, trained):
        run = trained / "run"
        for name in ("run.json", "model.ckpt", "losses.csv"):
            assert (run / name).exists(), name
        record = json.loads((run / "run.json").read_text())
        assert record["config"]["data.image_size"] == 32
        assert record["config"]["align.blocks"] == [3, 4, 5]
        with open(run / "losses.csv", newline="") as f:
            assert len(list(csv.reader(f))) == 4

    def test_eval(self, trained, capsys):
        run = trained / "run"
        assert main(["eval", "--data", str(trained / "data"), "--run", str(run), "--quiet"]) == 0
        report = json.loads((run / "eval" / "eval.json").read_text())
        assert 0.0 <= report["map"] <= 1.0
        assert "mAP@0.5 = " in capsys.readouterr().out

    def test_sweep(self, trained):
        run = trained / "run"
        assert main(["sweep-iou", "--data", str(trained / "data"), "--run", str(run), "--quiet"]) == 0
        with open(run / "sweep-iou" / "sweep.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["threshold", "map"]
        assert [float(r[0]) for r in rows[1:]] == pytest.approx(list(SWEEP_THRESHOLDS))

    def test_eval_without_run(self, trained, tmp_path):
        assert main(["eval", "--data", str(trained / "data"), "--run", str(tmp_path), "--quiet"]) == EXIT_IO

    def test_resume_finished_run(self, trained, tmp_path):
        args = ["train", "--data", str(trained / "data"), "--out", str(tmp_path), "--quiet", *SHORT_RUN]
        assert main(args + ["--stop-after", "1"]) == 0
        assert main(args + ["--resume"]) == 0
        state = json.loads((tmp_path / "train_state.json").read_text())
        assert state["iteration"] == 3


class TestPlot:
    def test_sweep_plot(self, tmp_path):
        (tmp_path / "sweep.csv").write_text("threshold,map\n0.50,0.7\n0.55,0.6\n")
        assert main(["plot", "--csv", str(tmp_path / "sweep.csv"), "--out", str(tmp_path / "sweep.svg"),
                     "--quiet"]) == 0
        assert "<svg" in (tmp_path / "sweep.svg").read_text()

    def test_losses_plot(self, trained, tmp_path):
        out = tmp_path / "losses.png"
        assert main(["plot", "--csv", str(trained / "run" / "losses.csv"), "--out", str(out), "--quiet"]) == 0
        assert out.read_bytes().startswith(b"\x89PNG")

    def test_plot_into_run_keeps_run_record(self, trained, tmp_path):
        run = tmp_path / "run"
        shutil.copytree(trained / "run", run)
        before = (run / "run.json").read_bytes()
        assert main(["plot", "--csv", str(run / "losses.csv"), "--out", str(run / "losses.svg"), "--quiet"]) == 0
        assert (run / "run.json").read_bytes() == before
        assert main(["eval", "--data", str(trained / "data"), "--run", str(run), "--quiet"]) == 0

    def test_unknown_csv(self, tmp_path):
        (tmp_path / "other.csv").write_text("a,b\n1,2\n")
        assert main(["plot", "--csv", str(tmp_path / "other.csv"), "--out", str(tmp_path / "x.svg"),
                     "--quiet"]) == EXIT_USAGE


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--case", "relu", "--case", "grl", "--out", str(tmp_path), "--quiet"]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert set(report) == {"relu", "grl"}
    assert all(entry["passed"] is True for entry in report.values())
    assert all(isinstance(entry["max_rel_err"], float) for entry in report.values())


def test_gradcheck_unknown_case(tmp_path):
    assert main(["gradcheck", "--case", "softplus", "--out", str(tmp_path), "--quiet"]) == EXIT_USAGE
