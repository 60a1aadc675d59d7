import json

import numpy as np
import pytest

from probmil import archive
from probmil.checkpoint import load_checkpoint
from probmil.cli import main
from probmil.metrics import MetricsReport
from probmil.training import RunLog


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.milb"
    assert main(["generate", "--out", str(path), "--classes", "3", "--features", "4",
                 "--bag-size", "5", "--bags-per-class", "12", "--seed", "1"]) == 0
    return path


def train_args(data, out, *extra):
    return ["train", "--data", str(data), "--out", str(out), "--hidden", "8",
            "--steps", "20", "--eval-every", "10", "--batch-size", "4", *extra]


class TestGenerate:
    def test_default_size(self, tmp_path, capsys):
        path = tmp_path / "d.milb"
        assert main(["generate", "--out", str(path), "--classes", "10", "--bags-per-class", "500"]) == 0
        assert "N=5000" in capsys.readouterr().out
        assert archive.read_header(path.read_bytes())["num_bags"] == 5000

    def test_byte_identical(self, tmp_path, small):
        again = tmp_path / "again.milb"
        main(["generate", "--out", str(again), "--classes", "3", "--features", "4",
              "--bag-size", "5", "--bags-per-class", "12", "--seed", "1"])
        assert again.read_bytes() == small.read_bytes()

    def test_skew(self, tmp_path):
        path = tmp_path / "s.milb"
        main(["generate", "--out", str(path), "--classes", "3", "--bags-per-class", "4",
              "--skew-ratio", "5", "--features", "2"])
        np.testing.assert_array_equal(archive.read_archive(path).class_counts(), [20, 4, 4])

    def test_infeasible_is_usage_error(self, tmp_path):
        code = main(["generate", "--out", str(tmp_path / "x"), "--bag-size", "2", "--positives", "3", "3"])
        assert code == 2


class TestInspect:
    def test_counts(self, small, capsys):
        assert main(["inspect", str(small)]) == 0
        out = capsys.readouterr().out
        assert "N=36 K=3 M=4" in out
        assert "class 2: 12 bags" in out
        assert "L=5: 36" in out

    def test_empty_archive(self, tmp_path, capsys):
        from probmil.data import Dataset

        path = tmp_path / "e.milb"
        archive.write_archive(Dataset([], 4, 2), path)
        assert main(["inspect", str(path)]) == 0
        assert "N=0" in capsys.readouterr().out

    def test_checkpoint_is_not_archive(self, tmp_path, small, capsys):
        ckpt = tmp_path / "m.miln"
        main(train_args(small, ckpt, "--steps", "0"))
        capsys.readouterr()
        assert main(["inspect", str(ckpt)]) == 3
        assert "MILN is not MILB" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["inspect", str(tmp_path / "nope")]) == 3


class TestTrainEval:
    def test_round_trip(self, tmp_path, small, capsys):
        ckpt = tmp_path / "m.miln"
        assert main(train_args(small, ckpt)) == 0
        net, strategy = load_checkpoint(ckpt)
        assert (net.feature_dim, net.num_classes, net.hidden) == (4, 3, [8])
        assert strategy.name == "attention"
        log = RunLog.from_keyvalue((tmp_path / "m.miln.runlog").read_text())
        assert [r.step for r in log.records] == [0, 10, 20]
        report = tmp_path / "r.txt"
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(small), "--report", str(report)]) == 0
        assert "macro" in capsys.readouterr().out
        rep = MetricsReport.from_keyvalue(report.read_text())
        assert rep.num_classes == 3 and 0.0 <= rep.mAP <= 1.0

    def test_zero_steps(self, tmp_path, small):
        ckpt = tmp_path / "z.miln"
        assert main(train_args(small, ckpt, "--steps", "0")) == 0
        log = RunLog.from_keyvalue((tmp_path / "z.miln.runlog").read_text())
        assert [r.step for r in log.records] == [0]

    def test_deterministic(self, tmp_path, small):
        for name in ("a", "b"):
            assert main(train_args(small, tmp_path / f"{name}.miln", "--dropout", "0.3")) == 0
        assert (tmp_path / "a.miln").read_bytes() == (tmp_path / "b.miln").read_bytes()
        assert (tmp_path / "a.miln.runlog").read_bytes() == (tmp_path / "b.miln.runlog").read_bytes()

    def test_config_file_and_override(self, tmp_path, small):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": str(small), "strategy": "max", "hidden": [6],
                                   "steps": 5, "eval_every": 5}))
        ckpt = tmp_path / "c.miln"
        assert main(["train", "--config", str(cfg), "--out", str(ckpt), "--hidden", "7"]) == 0
        net, strategy = load_checkpoint(ckpt)
        assert strategy.name == "max" and net.hidden == [7]

    def test_unknown_config_key(self, tmp_path, small):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": str(small), "learning_rate": 1.0}))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2

    def test_bad_flag_is_usage_error(self, tmp_path, small):
        with pytest.raises(SystemExit) as info:
            main(train_args(small, tmp_path / "x", "--balanced", "maybe"))
        assert info.value.code == 2

    def test_shape_mismatch_names_both(self, tmp_path, small, capsys):
        ckpt = tmp_path / "m.miln"
        main(train_args(small, ckpt, "--steps", "0"))
        other = tmp_path / "o.milb"
        main(["generate", "--out", str(other), "--classes", "3", "--features", "6", "--bags-per-class", "3"])
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(other)]) == 3
        err = capsys.readouterr().err
        assert "M=4" in err and "M=6" in err

    def test_numeric_failure_exit_code(self, tmp_path, small, capsys, monkeypatch):
        from probmil import cli
        from probmil.training import NumericError

        def diverge(*args, **kwargs):
            raise NumericError(3, float("nan"))

        monkeypatch.setattr(cli, "train", diverge)
        assert main(train_args(small, tmp_path / "d.miln")) == 4
        assert "step 3" in capsys.readouterr().err
