import json

import numpy as np
import pytest

from probret.cli import main
from probret.data import DataError
from probret.pipeline import (EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE, PipelineConfig, StageError,
                              config_hash, exit_code_for, load_config, run_experiment)
from probret.retrieval import CalibrationError
from probret.trainer import TrainConfig, TrainingError

SMALL_INI = """\
[synth]
num_queries = 4, 6, 10
mean_items = 40, 10, 4
noise_items = 300

[train]
steps = 40
batch_size = 16
dim = 8
hidden = 8

[experiment]
target_k = 20
sweep_p = 0.99, 0.9, 0.5
"""


@pytest.fixture
def ini(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_INI)
    return path


COMMANDS = ["gen", "train", "index", "calibrate", "retrieve", "eval", "sweep", "run"]


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    assert "--config" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train", "--data", "x"]) == EXIT_USAGE
    assert main(["sweep", "--index", "i", "--model", "m", "--data", "d", "--out", "o",
                 "--p", "0.5,1.5"]) == EXIT_USAGE


def test_missing_data_is_a_data_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) == EXIT_DATA
    code = main(["run", "--out", str(tmp_path / "exp"), "--data", str(tmp_path / "nope.tsv")])
    assert code == EXIT_DATA
    assert "stage 'ingest'" in capsys.readouterr().err


def test_exit_code_mapping():
    assert exit_code_for(DataError("x")) == EXIT_DATA
    assert exit_code_for(FileNotFoundError("x")) == EXIT_DATA
    assert exit_code_for(TrainingError(3, "nan")) == EXIT_NUMERIC
    assert exit_code_for(FloatingPointError()) == EXIT_NUMERIC
    assert exit_code_for(CalibrationError("x")) == EXIT_NUMERIC
    assert exit_code_for(ValueError("x")) == EXIT_USAGE
    assert StageError("train", TrainingError(2, "nan")).exit_code == EXIT_NUMERIC


def test_command_chain(tmp_path, ini, capsys):
    d, m, i = tmp_path / "data", tmp_path / "m.ckpt", tmp_path / "i.bin"
    assert main(["gen", "--spec", str(ini), "--out", str(d), "--seed", "2"]) == 0
    assert main(["train", "--config", str(ini), "--data", str(d), "--out", str(m)]) == 0
    assert main(["index", "--model", str(m), "--data", str(d), "--out", str(i)]) == 0
    common = ["--index", str(i), "--model", str(m), "--data", str(d)]
    capsys.readouterr()
    assert main(["calibrate", *common, "--target-k", "15", "--family", "cdf"]) == 0
    descriptor = capsys.readouterr().out.strip()
    assert descriptor.startswith("cdf:p=")
    assert main(["retrieve", *common, "--query", "q0", "--policy", descriptor, "--limit", "3"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("# tau=") and len(out) <= 4
    assert main(["eval", *common, "--policy", descriptor, "--k", "15",
                 "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev.txt").read_text().startswith("# config_hash=")
    assert main(["sweep", *common, "--p", "0.9,0.5", "--hist-p", "0.985",
                 "--out", str(tmp_path / "sw")]) == 0
    rows = [json.loads(x) for x in (tmp_path / "sw.jsonl").read_text().splitlines()[1:]]
    assert {r["stratum"] for r in rows} == {"head", "torso", "tail"}
    assert (tmp_path / "sw.histogram.jsonl").exists()
    assert main(["retrieve", *common, "--query", "q0", "--policy", "cdf:p=2"]) == EXIT_USAGE


def test_bad_checkpoint_is_a_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["index", "--model", str(bad), "--data", str(tmp_path), "--out", "x"]) == EXIT_DATA


def test_config_overrides_win(ini):
    cfg = load_config(ini, {"train": {"steps": 3}, "experiment": {"seed": 9}})
    assert cfg.train.steps == 3 and cfg.train.batch_size == 16
    assert cfg.resolved().synth.seed == 9 and cfg.resolved().train.seed == 9
    with pytest.raises(DataError):
        load_config(ini.parent / "missing.ini")


def test_config_hash_ignores_out_dir():
    a = PipelineConfig(out_dir="a")
    b = PipelineConfig(out_dir="b")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(PipelineConfig(seed=1))
    assert len(config_hash(a)) == 64


def test_run_writes_all_artifacts(tmp_path, ini, capsys):
    assert main(["run", "--config", str(ini), "--out", str(tmp_path / "exp")]) == 0
    out = capsys.readouterr().out
    chash = out.strip().splitlines()[-1].split("=")[1]
    reports = tmp_path / "exp" / "reports"
    for name in ("calibration", "topk", "score", "cdf", "comparison", "sweep", "histogram"):
        first = (reports / f"{name}.jsonl").read_text().splitlines()[0]
        assert json.loads(first) == {"config_hash": chash}
        assert (reports / f"{name}.txt").read_text().startswith(f"# config_hash={chash}\n")
    for name in ("model.ckpt", "index.bin", "data/clicks.tsv"):
        assert (tmp_path / "exp" / name).exists()
    assert not list((tmp_path / "exp").rglob("*.partial"))


def test_training_failure_names_stage(tmp_path, monkeypatch):
    import probret.pipeline as pl

    def boom(cfg, data):
        raise TrainingError(7, "non-finite loss")

    monkeypatch.setattr(pl, "train", boom)
    cfg = PipelineConfig(out_dir=str(tmp_path), train=TrainConfig(steps=1))
    with pytest.raises(StageError) as err:
        run_experiment(cfg)
    assert err.value.stage == "train" and err.value.exit_code == EXIT_NUMERIC
