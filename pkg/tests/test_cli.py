import csv

import pytest

from sgdpo import cli
from sgdpo import verify as vf
from sgdpo.trainer import read_history_csv

SMALL = ["--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32", "--n-examples", "32"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gradflow_unit_row(tmp_path):
    assert run("gradflow", "--method", "dpo", "--beta", "0.1", "--out", tmp_path) == 0
    with open(tmp_path / "dpo_field.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if float(r["x1"]) == 1.0 and float(r["x2"]) == 1.0]
    assert len(rows) == 1
    assert float(rows[0]["dx1"]) == pytest.approx(0.05, abs=1e-12)
    assert float(rows[0]["dx2"]) == pytest.approx(-0.05, abs=1e-12)
    assert (tmp_path / "dpo_field.svg").exists()


def test_pilot_gradflow_and_landscapes(tmp_path):
    assert run("gradflow", "--method", "pilot", "--y1", "0.5", "--y2", "0.8", "--out", tmp_path) == 0
    assert (tmp_path / "pilot_field.csv").exists()
    for kind in ("fz", "dX1", "dX2"):
        assert run("landscape", "--kind", kind, "--resolution", "8", "--out", tmp_path) == 0
        assert (tmp_path / f"landscape_{kind}.csv").exists() and (tmp_path / f"landscape_{kind}.svg").exists()


def test_train_writes_history_and_checkpoint(tmp_path):
    argv = ["train", "--method", "sgdpo", "--r1", "0.9", "--r2", "0.6", "--po-steps", "3", "--sft-steps", "2",
            *SMALL, "--out", tmp_path]
    assert run(*argv) == 0
    hist = read_history_csv(tmp_path / "history.csv")
    assert len(hist) >= 1
    assert (tmp_path / "policy.npz").exists() and (tmp_path / "train_config.json").exists()


def test_cli_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("train", "--method", "dpo", "--po-steps", "3", "--sft-steps", "2", "--seed", "4", *SMALL,
                   "--out", out) == 0
        outs.append(out)
    for f in ("history.csv", "policy.npz", "train_config.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("method = dpo\npo_steps = 5\nsft_steps = 1\nbeta = 0.2\n")
    assert run("train", "--config", cfg, "--po-steps", "2", *SMALL, "--out", tmp_path) == 0
    assert len(read_history_csv(tmp_path / "history.csv")) == 2
    assert '"beta": 0.2' in (tmp_path / "train_config.json").read_text()


def test_synth_then_sft_then_train_from_file(tmp_path):
    assert run("synth", "--rule", "b", "--n-examples", "20", "--out", tmp_path) == 0
    data = tmp_path / "pairs.jsonl"
    assert len(data.read_text().splitlines()) == 20
    assert run("sft", "--data", data, "--sft-steps", "2", *SMALL, "--out", tmp_path) == 0
    assert run("train", "--data", data, "--init", tmp_path / "sft.npz", "--skip-sft", "--po-steps", "2",
               "--out", tmp_path / "po") == 0


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert run("gradflow", "--no-svg", "--resolution", "4") == 0
    assert (tmp_path / "env" / "dpo_field.csv").exists()


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        run("train", "--no-such-flag")
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_value_exits_2(tmp_path, capsys):
    assert run("train", "--r1", "1.5", "--out", tmp_path) == 2
    assert "r1" in capsys.readouterr().err


def test_missing_data_file_exits_1(tmp_path):
    assert run("train", "--data", tmp_path / "missing.jsonl", "--out", tmp_path) == 1


def test_verify_failure_names_check(tmp_path, monkeypatch, capsys):
    def broken(out_dir):
        return [vf.CheckResult("ratio identities", True, "ok"), vf.CheckResult("f(z) laws", False, "bad")]

    monkeypatch.setattr(vf, "run_all", broken)
    assert run("verify", "--out", tmp_path) == 1
    assert "f(z) laws" in capsys.readouterr().err


def test_verify_clean_build(tmp_path, capsys):
    assert run("verify", "--out", tmp_path) == 0
    out = capsys.readouterr().out
    for name in ("gradient-ratio identities", "monotonicity", "f(z)", "model-level gradient check"):
        assert name in out
