import io
import json
import subprocess
import sys

import pytest

from dian import cli
from dian.numerics import ConfigError

TINY = {
    "gen": {"n_users": 60, "n_items": 80, "n_categories": 5, "n_sessions": 200, "long_len_max": 30},
    "model": {"d_id": 6, "d_cat": 2, "n_heads": 2, "mlp_hidden": [8, 4], "K_l": 30},
    "train": {"batch_size": 32, "eval_every": 2},
}


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    return tmp_path, cfg


def test_config_overrides_and_unknown_keys():
    rc = cli.build_run_config(TINY, ["model.n_heads=4", "train.learning_rate=0.001", "model.variant=TAN_ONLY"])
    assert rc.model.n_heads == 4 and rc.train.learning_rate == 0.001 and rc.model.variant == "TAN_ONLY"
    assert rc.gen.n_sessions == 200
    with pytest.raises(ConfigError, match="gen.nope"):
        cli.build_run_config({"gen": {"nope": 1}})
    with pytest.raises(ConfigError, match="section"):
        cli.build_run_config({}, ["optim.lr=1"])
    with pytest.raises(ConfigError, match="expected int"):
        cli.build_run_config({}, ["gen.n_users=many"])


def test_help_lists_every_key():
    out = subprocess.run([sys.executable, "-m", "dian", "--help"], capture_output=True, text=True, check=True).stdout
    for section, cls in (("gen", cli.GenConfig), ("model", cli.ModelConfig), ("train", cli.TrainConfig)):
        for name in cls.__dataclass_fields__:
            assert f"{section}.{name} = " in out


def test_generate_is_byte_identical(workdir, capsys):
    tmp, cfg = workdir
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp / "again")]) == 0
    for name in ("train.jsonl", "test.jsonl", "sidecar.json"):
        assert (tmp / "data" / name).read_bytes() == (tmp / "again" / name).read_bytes()
    assert "base CTR" in capsys.readouterr().out


def test_generate_rejects_zero_sessions(tmp_path, capsys):
    assert cli.main(["generate", "--set", "gen.n_sessions=0", "--out", str(tmp_path / "x")]) == 2
    assert "n_sessions" in capsys.readouterr().err


def test_train_eval_predict(workdir, capsys):
    tmp, cfg = workdir
    ckpt = tmp / "m.json"
    assert cli.main(["train", "--config", str(cfg), "--data", str(tmp / "data"), "--out", str(ckpt)]) == 0
    lines = (tmp / "m.json.metrics.jsonl").read_text().splitlines()
    steps = json.loads(lines[-1])["step"]
    assert len(lines) == steps // 2 + 1 and json.loads(lines[-1])["final"]
    capsys.readouterr()

    assert cli.main(["eval", "--checkpoint", str(ckpt), "--dataset", str(tmp / "data" / "test.jsonl"), "--compare", "oracle"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["oracle_gap"] == pytest.approx(rep["oracle_auc"] - rep["ctr_auc"])

    assert cli.main(["eval", "--oracle-scores", "--dataset", str(tmp / "data" / "test.jsonl"), "--compare", "oracle"]) == 0
    assert json.loads(capsys.readouterr().out)["oracle_gap"] == 0.0

    record = (tmp / "data" / "test.jsonl").read_text().splitlines()[0]
    assert cli.cmd_predict(str(ckpt), io.StringIO(record)) == 0
    rows = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert len(rows) == len(json.loads(record)["candidates"])
    for r in rows:
        assert r["y_hat"] == pytest.approx(r["y_int"] * r["y_tan"] + (1 - r["y_int"]) * r["y_tfn"], abs=1e-12)


def test_eval_oracle_needs_sidecar(workdir, capsys):
    tmp, cfg = workdir
    lone = tmp / "lone.jsonl"
    lone.write_text((tmp / "data" / "test.jsonl").read_text())
    assert cli.main(["eval", "--oracle-scores", "--dataset", str(lone), "--compare", "oracle"]) == 2
    assert "sidecar" in capsys.readouterr().err


def test_eval_rejects_foreign_dataset(workdir, capsys):
    tmp, cfg = workdir
    ckpt = tmp / "m.json"
    cli.main(["train", "--config", str(cfg), "--data", str(tmp / "data"), "--out", str(ckpt), "--set", "train.max_steps=1"])
    big = tmp / "big"
    cli.main(["generate", "--config", str(cfg), "--set", "gen.n_items=500", "--set", "gen.n_users=400", "--out", str(big)])
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--dataset", str(big / "test.jsonl")]) == 2
    assert "vocabulary" in capsys.readouterr().err


def test_gradcheck_passes_and_catches_fault(capsys):
    assert cli.main(["gradcheck"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["pass"] and rep["coordinates"] >= 200 and rep["tables_probed"] == rep["tables_total"]
    assert cli.main(["gradcheck", "--inject-fault", "tan.tar.short.wk"]) == 3
    err = capsys.readouterr().err
    assert "tan.tar.short.wk[" in err


def test_gradcheck_rejects_bad_heads(capsys):
    assert cli.main(["gradcheck", "--set", "model.n_heads=5"]) == 2
    assert "divisible" in capsys.readouterr().err


def test_unwritable_output_is_a_validation_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["generate", "--set", "gen.n_sessions=5", "--out", str(blocker / "sub")]) == 2
