import csv
import json
import subprocess
import sys

import pytest

from tempeq.cli import main
from tempeq.config import ConfigError, apply_override, config_from_dict, parse_override

TINY = {
    "generator": {"n_patients": 24, "obs_dim": 16, "seed": 0},
    "model": {"obs_dim": 16, "rep_dim": 8, "proj_dim": 16, "encoder_hidden": [16]},
    "trainer": {"epochs": 4, "batch_size": 16, "warmup_epochs": 1},
    "probe": {"epochs": 3, "n_folds": 2},
    "evaluation": {"n_diag_patients": 8},
}


@pytest.fixture
def cfg_path(tmp_path):
    cfg = dict(TINY, output_dir=str(tmp_path / "out"))
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def tempeq(*args) -> int:
    return main([str(a) for a in args])


# config ----------------------------------------------------------------------


def test_parse_override():
    assert parse_override("trainer.epochs=3") == ("trainer.epochs", 3)
    assert parse_override("output_dir=runs/x") == ("output_dir", "runs/x")
    assert parse_override('arms=["tc"]') == ("arms", ["tc"])
    assert parse_override("a=b=c") == ("a", "b=c")
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_override_touches_one_field():
    base = {"trainer": {"epochs": 5, "seed": 1}}
    out = apply_override(base, "trainer.epochs", 7)
    assert out == {"trainer": {"epochs": 7, "seed": 1}}
    assert base["trainer"]["epochs"] == 5


@pytest.mark.parametrize(
    "data, field",
    [
        ({"trainer": {"epoch": 1}}, "trainer.epoch"),
        ({"bogus": 1}, "bogus"),
        ({"generator": {"n_patients": "many"}}, "generator.n_patients"),
        ({"trainer": {"tc": {"beta": "x"}}}, "trainer.tc.beta"),
        ({"augment": {"scale_range": [1.0]}}, "augment.scale_range"),
        ({"model": {"obs_dim": 32}}, "model.obs_dim"),
        ({"generator": {"noise_std": -1.0}}, "generator.noise_std"),
    ],
)
def test_field_level_errors(data, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config_from_dict(data)


def test_defaults_are_valid():
    cfg = config_from_dict({})
    assert cfg.trainer.base_lr == 5e-4 and cfg.trainer.batch_size == 128
    assert cfg.probe.epochs == 50 and cfg.probe.lr == 1e-4
    assert cfg.arms == ["tc", "tc_no_dm", "tc_no_reg", "vicreg_only"]


# commands -------------------------------------------------------------------


def test_smoke_pipeline(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert tempeq("gen-data", "--config", cfg_path) == 0
    assert (out / "data" / "visits.jsonl").is_file()
    assert tempeq("pretrain", "--config", cfg_path, "--arm", "vicreg_only", "--set", "trainer.epochs=1") == 0
    ck = out / "arms" / "vicreg_only"
    assert (ck / "checkpoint.json").is_file() and (ck / "tensors.bin").is_file()
    manifest = json.loads((ck / "checkpoint.json").read_text())
    assert "trainer.epochs=1" in manifest["extra"]["overrides"]
    assert manifest["config"]["epochs"] == 1


def test_full_command_set(cfg_path, tmp_path):
    out = tmp_path / "out"
    for cmd in ("gen-data", "pretrain", "probe", "tc-syn", "diagnose", "report"):
        assert tempeq(cmd, "--config", cfg_path) == 0, cmd
    metrics = json.loads((out / "metrics.json").read_text())
    assert {"tc", "tc_no_dm", "tc_no_reg", "vicreg_only", "tc_syn", "diagnostics"} <= set(metrics)
    assert set(metrics["tc"]["12"]) == {"auroc", "prauc", "bacc", "fold_mean", "fold_std"}
    with open(out / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5 * 2
    assert {r["arm"] for r in rows} == {"vicreg_only", "tc", "tc_no_dm", "tc_no_reg", "tc_syn"}
    assert list(rows[0]) == ["arm", "window", "auroc_mean", "auroc_std", "prauc_mean", "prauc_std", "bacc_mean", "bacc_std"]
    assert "±" in (out / "report.txt").read_text()
    assert (out / "distance_table.csv").read_text().startswith("dt_months,mean_distance,std_distance\n")
    assert (out / "arms" / "tc" / "embeddings.csv").is_file()
    assert (out / "arms" / "tc" / "train_log.csv").read_text().startswith(
        "step,lr,s_term,v_term,c_term,contrastive,equivariance,regularization,total,mean_dm_norm\n"
    )


def test_rerun_is_byte_identical(cfg_path, tmp_path):
    out = tmp_path / "out"
    snapshots = []
    for _ in range(2):
        for cmd in ("gen-data", "pretrain", "probe"):
            assert tempeq(cmd, "--config", cfg_path, "--set", 'arms=["tc"]') == 0
        snapshots.append(
            {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
        )
    assert snapshots[0] == snapshots[1]


def test_grad_check_gate(cfg_path):
    assert tempeq("grad-check", "--config", cfg_path) == 0


def test_config_errors_exit_2(cfg_path, tmp_path, capsys):
    assert tempeq("pretrain", "--config", cfg_path, "--set", "trainer.epochz=3") == 2
    assert "trainer.epochz" in capsys.readouterr().err
    assert tempeq("pretrain", "--config", tmp_path / "missing.json") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert tempeq("gen-data", "--config", bad) == 2


def test_missing_inputs_exit_2(cfg_path, capsys):
    assert tempeq("probe", "--config", cfg_path) == 2
    assert "gen-data" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_3(cfg_path):
    assert tempeq("gen-data", "--config", cfg_path) == 0
    assert tempeq("pretrain", "--config", cfg_path, "--arm", "tc", "--set", "trainer.base_lr=1e300") == 3


def test_thread_env(cfg_path, monkeypatch):
    monkeypatch.setenv("TEMPEQ_THREADS", "zero")
    assert tempeq("grad-check", "--config", cfg_path) == 2


def test_console_entry_point(cfg_path):
    proc = subprocess.run(
        [sys.executable, "-m", "tempeq.cli", "report", "--config", str(cfg_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2 and "metrics.json" in proc.stderr
