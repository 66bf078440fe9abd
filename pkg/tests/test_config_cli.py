import filecmp
from dataclasses import replace

import pytest

from cycletrans.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, run
from cycletrans.config import (DATA_ROOT_ENV, ConfigError, RunConfig, parse_config_text,
                               parse_overrides, resolve)
from cycletrans.gradcheck import DEFAULT_SEED

SMALL = ["--num_identities", "4", "--samples_per_modality", "4", "--test_samples_per_modality", "2",
         "--hw", "4", "--raw_dim", "5"]
SMALL_MODEL = ["--dim", "6", "--num_queries", "3", "--num_prototypes", "4", "--init_std", "1.0",
               "--epochs", "2", "--lr", "1e-3", "--batch_identities", "2", "--k_visible", "2",
               "--k_infrared", "2"]


# ------------------------------------------------------------------ config

def test_defaults_and_desk_preset():
    cfg = resolve("train", {}, env={})
    assert cfg.init_std == 0.02 and cfg.lr == 3.5e-4 and cfg.gradcheck_seed == DEFAULT_SEED
    desk = resolve("train", {"preset": "desk"}, env={})
    assert desk.init_std == 1.0 and desk.lr == 1e-3 and desk.epochs == 30


def test_lambda_presets():
    assert resolve("train", {"preset": "regdb-lambdas"}, env={}).lambdas != \
        resolve("train", {"preset": "sysu-lambdas"}, env={}).lambdas


def test_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("preset = desk\nlr = 0.005  # file beats preset\nepochs = 3\n"
                 "data_root = from_file\n")
    cfg = resolve("train", {"config": str(f), "epochs": "4"}, env={})
    assert cfg.lr == 0.005 and cfg.epochs == 4 and cfg.init_std == 1.0
    assert cfg.data_root == "from_file"
    cfg = resolve("train", {"config": str(f)}, env={DATA_ROOT_ENV: "from_env"})
    assert cfg.data_root == "from_env"
    cfg = resolve("train", {"config": str(f), "data_root": "flag"}, env={DATA_ROOT_ENV: "from_env"})
    assert cfg.data_root == "flag"


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        parse_config_text("nonsense = 1\n")
    with pytest.raises(ConfigError):
        parse_overrides(["--nonsense", "1"])
    with pytest.raises(ConfigError):
        resolve("train", {"preset": "huge"}, env={})
    with pytest.raises(ConfigError):
        resolve("train", {"epochs": "many"}, env={})
    with pytest.raises(ConfigError):
        resolve("train", {"config": str(tmp_path / "missing.cfg")}, env={})


def test_override_syntax():
    assert parse_overrides(["--k-visible", "3", "--lr=0.1"]) == {"k_visible": "3", "lr": "0.1"}
    with pytest.raises(ConfigError):
        parse_overrides(["--lr"])
    with pytest.raises(ConfigError):
        parse_overrides(["lr", "1"])


def test_dump_is_replayable(tmp_path):
    cfg = resolve("train", {"preset": "desk", "milestones": "5,9", "clip": "2.5"}, env={})
    f = tmp_path / "echo.cfg"
    cfg.write(f)
    again = resolve("train", {"config": str(f)}, env={})
    assert replace(again, config="") == cfg
    assert isinstance(again, RunConfig)


# --------------------------------------------------------------------- cli

def test_cli_usage_and_bad_command(capsys):
    assert run(["--help"]) == EXIT_OK
    assert run([]) == EXIT_CONFIG
    assert run(["fly"]) == EXIT_CONFIG
    assert run(["train", "--bogus", "1"]) == EXIT_CONFIG
    assert "unknown config key" in capsys.readouterr().err


def test_cli_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run(["synth", "--seed", "7", "--data_root", str(tmp_path / name),
                    "--out", str(tmp_path / f"out_{name}"), *SMALL]) == EXIT_OK
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for f in (tmp_path / "a" / "tensors").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "tensors" / f.name).read_bytes()


def test_cli_missing_data_is_io_error(tmp_path, capsys):
    code = run(["train", "--data_root", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")])
    assert code == EXIT_IO
    assert "i/o error" in capsys.readouterr().err
    assert run(["eval", "--out", str(tmp_path / "o"), "--data_root", str(tmp_path)]) == EXIT_IO


def test_cli_train_eval_export(tmp_path, capsys):
    data, out = str(tmp_path / "data"), str(tmp_path / "run")
    assert run(["synth", "--data_root", data, "--out", out, *SMALL]) == EXIT_OK
    common = ["--data_root", data, "--out", out, *SMALL, *SMALL_MODEL]
    assert run(["train", *common]) == EXIT_OK
    assert (tmp_path / "run" / "model.ckpt").exists()
    assert (tmp_path / "run" / "loss_log.csv").exists()
    assert run(["eval", *common, "--protocol", "multi-shot"]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "rank1" in printed and "mAP" in printed
    assert (tmp_path / "run" / "eval_report.csv").read_text().startswith("protocol,")
    assert run(["export-embeddings", *common]) == EXIT_OK
    lines = (tmp_path / "run" / "embeddings_query.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 * 2
    # the echoed effective config reproduces the run configuration
    echoed = resolve("export-embeddings", {"config": str(tmp_path / "run" / "effective_config.txt")},
                     env={})
    assert replace(echoed, config="") == resolve("export-embeddings", parse_overrides(common), env={})


def test_cli_gradcheck(tmp_path, capsys):
    assert run(["gradcheck", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "total" in out and "L_MMD" in out
