import json
from pathlib import Path

import numpy as np
import pytest

from flowctrl import cli
from flowctrl import config as C
from flowctrl import pipeline as P

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"
STAGES = ["generate", "curate", "pretrain", "train-aligner", "rlhr", "eval --policy bc", "eval --policy rlhr"]


def _run(ws, *args, config=SMOKE):
    return cli.main([*args, "--config", str(config), "--workspace", str(ws)])


def _pipeline(ws):
    for stage in STAGES:
        assert _run(ws, *stage.split()) == 0, stage


def test_defaults_round_trip_through_yaml(tmp_path):
    cfg = C.RunConfig()
    path = tmp_path / "c.yaml"
    path.write_text(C.dump(cfg))
    assert C.load(path) == cfg
    assert C.load(path).digest() == cfg.digest()
    assert cfg.replace(seed=1).digest() != cfg.digest()


def test_smoke_config_loads():
    cfg = C.load(SMOKE)
    assert cfg.vocab.build().M == cfg.rlhr.n_envs == 2
    assert cfg.model.d_s == cfg.env.d_s


@pytest.mark.parametrize("text", [
    "bogus: 1\n",
    "model: {bogus: 1}\n",
    "model: {hidden: 3, n_heads: 2}\n",
    "precision: f16\n",
    "rlhr: {n_envs: 3}\n",
    "data: {split: 0.5}\n",
    "seed: [1\n",
])
def test_bad_configs_are_usage_errors(tmp_path, text, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    assert cli.main(["generate", "--config", str(path), "--workspace", str(tmp_path / "ws")]) == cli.EXIT_USAGE
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "ws").exists()


def test_unknown_key_message_names_valid_keys(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("stage1: {stpes: 10}\n")
    with pytest.raises(C.ConfigError, match="stpes.*valid keys.*steps"):
        C.load(path)


def test_argument_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["pretrain", "--precision", "f16"])
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == cli.EXIT_USAGE
    assert cli.main(["generate", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_USAGE


@pytest.mark.parametrize("stage", ["curate", "pretrain", "train-aligner", "rlhr", "eval", "report"])
def test_missing_prerequisites_exit_two(tmp_path, stage, capsys):
    ws = tmp_path / "ws"
    assert _run(ws, stage) == cli.EXIT_MISSING
    assert "missing prerequisite" in capsys.readouterr().err
    assert not (ws / "checkpoints").exists() or not any((ws / "checkpoints").iterdir())


def test_rlhr_requires_pretrained_checkpoint(tmp_path):
    ws = tmp_path / "ws"
    assert _run(ws, "generate") == 0 and _run(ws, "curate") == 0
    assert _run(ws, "rlhr") == cli.EXIT_MISSING
    assert not (ws / P.LAYOUT["rlhr"]).exists()


def test_numerical_failure_exit_three(tmp_path, monkeypatch, capsys):
    def boom(cfg, ws):
        with P.numerics_guard("pretrain"):
            raise FloatingPointError("loss is NaN at step 3")
    monkeypatch.setattr(P, "cmd_pretrain", boom)
    assert _run(tmp_path / "ws", "pretrain") == cli.EXIT_NUMERIC
    assert "NaN" in capsys.readouterr().err


def test_zero_repeats_warns_and_writes_empty_dataset(tmp_path, caplog):
    cfg_path = tmp_path / "zero.yaml"
    cfg_path.write_text(SMOKE.read_text().replace("repeats: 6", "repeats: 0"))
    ws = tmp_path / "ws"
    with caplog.at_level("WARNING", logger="flowctrl"):
        assert _run(ws, "generate", config=cfg_path) == 0
    assert "empty dataset" in caplog.text
    assert json.loads((ws / P.LAYOUT["manifest"]).read_text())["count"] == 0
    assert _run(ws, "curate", config=cfg_path) == 0
    assert _run(ws, "pretrain", config=cfg_path) == cli.EXIT_MISSING


def test_seed_override_changes_data(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(a, "generate") == 0
    assert _run(b, "generate", "--seed", "8") == 0
    assert (a / P.LAYOUT["corpus"]).read_bytes() != (b / P.LAYOUT["corpus"]).read_bytes()
    stamp = json.loads((b / "stamps" / "generate.json").read_text())
    assert stamp["seed"] == 8


def test_stage_generators_are_independent():
    a = P.stage_rng(0, "pretrain").random(4)
    assert np.array_equal(a, P.stage_rng(0, "pretrain").random(4))
    assert not np.array_equal(a, P.stage_rng(0, "aligner").random(4))
    assert not np.array_equal(a, P.stage_rng(1, "pretrain").random(4))


def test_full_smoke_pipeline_is_bit_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(a)
    _pipeline(b)
    for key in ("corpus", "manifest", "curation", "train_windows", "val_windows", "stage1", "aligner", "rlhr"):
        assert (a / P.LAYOUT[key]).read_bytes() == (b / P.LAYOUT[key]).read_bytes(), key
    for name in ("bc", "rlhr"):
        txt_a, _ = P.Workspace(a).eval_paths(name)
        txt_b, _ = P.Workspace(b).eval_paths(name)
        assert txt_a.read_text() == txt_b.read_text()
    assert _run(a, "report") == 0
    out = capsys.readouterr().out
    assert "eval bc" in out and "rlhr vs bc" in out
    log = (a / P.LAYOUT["rlhr_log"]).read_text().splitlines()
    assert len(log) == 1 + C.load(SMOKE).rlhr.iterations
    ratio_err = [float(row.split(",")[-1]) for row in log[1:]]
    assert max(ratio_err) < 1e-12


def test_pretraining_resumes_exactly(tmp_path, monkeypatch):
    monkeypatch.setattr(P, "CHECKPOINT_EVERY", 10)
    full, resumed = tmp_path / "full", tmp_path / "resumed"
    for ws in (full, resumed):
        assert _run(ws, "generate") == 0 and _run(ws, "curate") == 0
    assert _run(full, "pretrain") == 0

    real_call = P.CsvLog.__call__

    def interrupt(self, row):
        if row.get("step") == 20:
            raise KeyboardInterrupt
        real_call(self, row)

    monkeypatch.setattr(P.CsvLog, "__call__", interrupt)
    with pytest.raises(KeyboardInterrupt):
        _run(resumed, "pretrain")
    assert (resumed / P.LAYOUT["stage1_partial"]).exists()
    monkeypatch.setattr(P.CsvLog, "__call__", real_call)
    assert _run(resumed, "pretrain") == 0
    assert not (resumed / P.LAYOUT["stage1_partial"]).exists()
    assert (full / P.LAYOUT["stage1"]).read_bytes() == (resumed / P.LAYOUT["stage1"]).read_bytes()
