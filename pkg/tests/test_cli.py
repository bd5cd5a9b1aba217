import csv
import logging

import pytest

from conftest import tiny_config
from ildet.cli import EXIT_DIVERGED, EXIT_INVALID, EXIT_OK, build_parser, main
from ildet.experiments import ExperimentConfig


@pytest.fixture
def ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(tiny_config().to_ini())
    return path


def _run(*argv):
    return main([str(a) for a in argv])


class TestCommands:
    def test_gen_data(self, ini, tmp_path, capsys):
        out = tmp_path / "out"
        assert _run("gen-data", "--config", ini, "--out", out) == EXIT_OK
        for name in ("train_old", "train_new", "val", "test"):
            assert (out / f"{name}.ildet").exists()
        assert ExperimentConfig.from_file(out / "config.ini") == tiny_config()

    def test_train_then_extend_from_checkpoint(self, ini, tmp_path, capsys):
        out = tmp_path / "out"
        assert _run("train-base", "--config", ini, "--out", out) == EXIT_OK
        ckpt = next(out.glob("*.ildet"))
        assert _run("extend", "--config", ini, "--out", out / "ext", "--checkpoint", ckpt,
                    "--method", "distill_l2", "--lambda", "0.5") == EXIT_OK
        assert "distill_l2" in capsys.readouterr().out
        assert ExperimentConfig.from_file(out / "ext" / "config.ini").lam == 0.5
        with open(out / "ext" / "summary.csv") as f:
            assert len(list(csv.DictReader(f))) == 1

    def test_evaluate_uses_checkpoint_config(self, ini, tmp_path, capsys):
        out = tmp_path / "out"
        _run("train-base", "--config", ini, "--out", out)
        ckpt = next(out.glob("*.ildet"))
        first = capsys.readouterr().out.splitlines()[-1]
        assert _run("evaluate", "--checkpoint", ckpt, "--out", tmp_path / "ev") == EXIT_OK
        again = capsys.readouterr().out.splitlines()[-1]
        assert first.split(":", 1)[1] == again.split(":", 1)[1]

    def test_sequential_prints_each_stage(self, ini, tmp_path, capsys):
        assert _run("extend-seq", "--config", ini, "--out", tmp_path) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert any("[+3]" in l for l in lines) and any("[+4]" in l for l in lines)

    def test_sweep(self, ini, tmp_path):
        assert _run("sweep-lambda", "--config", ini, "--out", tmp_path, "--lambdas", "0,2") == EXIT_OK
        with open(tmp_path / "lambda_sweep.csv") as f:
            assert [float(r["lambda"]) for r in csv.DictReader(f)] == [0.0, 2.0]

    def test_ewc_extend_needs_fisher_checkpoint(self, ini, tmp_path, capsys):
        _run("train-base", "--config", ini, "--out", tmp_path)
        ckpt = next(tmp_path.glob("*.ildet"))
        code = _run("extend", "--config", ini, "--out", tmp_path, "--checkpoint", ckpt,
                    "--method", "ewc")
        assert code == EXIT_INVALID and "Fisher" in capsys.readouterr().err


class TestExitCodes:
    def test_unknown_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[experiment]\nbogus = 1\n")
        assert _run("train-base", "--config", bad, "--out", tmp_path) == EXIT_INVALID
        assert "bogus" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert _run("train-base", "--config", tmp_path / "none.ini", "--out", tmp_path) == EXIT_INVALID

    def test_missing_checkpoint(self, ini, tmp_path):
        assert _run("evaluate", "--config", ini, "--out", tmp_path) == EXIT_INVALID
        assert _run("evaluate", "--checkpoint", tmp_path / "gone.ildet", "--out", tmp_path) == EXIT_INVALID

    def test_divergence(self, tmp_path, capsys):
        path = tmp_path / "hot.ini"
        path.write_text(tiny_config(phase1_lr=1000.0, momentum=0.99).to_ini())
        assert _run("train-base", "--config", path, "--out", tmp_path) == EXIT_DIVERGED
        assert "diverged" in capsys.readouterr().err

    def test_unknown_method_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["extend", "--method", "magic"])
        assert exc.value.code == 2


def test_log_level_from_environment(ini, tmp_path, monkeypatch):
    monkeypatch.setenv("ILDET_LOG_LEVEL", "debug")
    root = logging.getLogger()
    saved = (root.level, list(root.handlers))
    root.handlers.clear()
    try:
        _run("gen-data", "--config", ini, "--out", tmp_path)
        assert root.level == logging.DEBUG
    finally:
        root.handlers[:] = saved[1]
        root.setLevel(saved[0])
