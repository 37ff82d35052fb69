import json

import pytest

from plugcompat.cli import build_parser, load_config, main, parse_depths
from plugcompat.errors import ConfigError
from plugcompat.tuners import TunerModule


@pytest.fixture
def base_file(base_pair, tmp_path):
    path = tmp_path / "base.pcmp"
    base_pair.save(path)
    return str(path)


@pytest.fixture
def pair_files(base_pair, upgraded_pair, tmp_path):
    base_pair.save(tmp_path / "b.pcmp")
    upgraded_pair.save(tmp_path / "u.pcmp")
    return f"{tmp_path / 'b.pcmp'},{tmp_path / 'u.pcmp'}"


def write_config(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "nope.json"), "pretrain", "--out", str(tmp_path / "x")]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = write_config(tmp_path, {"learning_rate": 1})
    assert main(["--config", cfg, "pretrain", "--out", str(tmp_path / "x")]) == 2


def test_bad_subcommand_arguments_exit_2(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["tune", "--method", "nonsense"])
    assert err.value.code == 2


def test_missing_checkpoint_is_io_error(tmp_path):
    assert main(["--quiet", "upgrade", "--base", str(tmp_path / "none.pcmp"), "--out", str(tmp_path / "u")]) == 4


def test_gate_failure_exit_3(base_file, tmp_path):
    cfg = write_config(tmp_path, {"upgrade": {"kind": "synthetic_drift", "sigma0": 0.5, "realign_epochs": 0, "retries": 0}})
    assert main(["--quiet", "--config", cfg, "upgrade", "--base", base_file, "--out", str(tmp_path / "u.pcmp")]) == 3
    assert not (tmp_path / "u.pcmp").exists()


def test_noop_upgrade_writes_identical_text(base_file, base_pair, tmp_path):
    cfg = write_config(tmp_path, {"upgrade": {"epochs": 0}})
    assert main(["--quiet", "--config", cfg, "upgrade", "--base", base_file, "--out", str(tmp_path / "u.pcmp")]) == 0
    from plugcompat.encoder import ModelPair

    assert ModelPair.load(tmp_path / "u.pcmp").text_checksum() == base_pair.text_checksum()


def test_tune_same_seed_identical_bytes(base_file, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.pcmp"
        args = ["--quiet", "tune", "--base", base_file, "--task", "0", "--method", "contcoop", "--epochs", "3",
                "--seed", "5", "--out", str(out)]
        assert main(args) == 0
        outs.append((out.read_bytes(), (tmp_path / f"{name}.pcmp.json").read_bytes()))
    assert outs[0] == outs[1]


def test_ctx_len_sweep_in_one_run(base_file, tmp_path):
    out = tmp_path / "m.pcmp"
    args = ["--quiet", "tune", "--base", base_file, "--task", "1", "--method", "coop", "--ctx-len", "4", "8", "16",
            "--epochs", "2", "--out", str(out)]
    assert main(args) == 0
    for n in (4, 8, 16):
        module = TunerModule.load(f"{out}.n{n}")
        assert module.hyper.ctx_len == n and module.params["ctx"].shape[0] == n


def test_tune_flags_reach_hyperparameters(base_file, tmp_path):
    out = tmp_path / "m.pcmp"
    args = ["--quiet", "tune", "--base", base_file, "--task", "0", "--method", "contcoop", "--lambda", "0",
            "--heads", "2", "--condition", "template", "--epochs", "1", "--out", str(out)]
    assert main(args) == 0
    h = TunerModule.load(out).hyper
    assert (h.lam, h.heads, h.condition, h.ctx_len) == (0.0, 2, "template", 16)


def test_eval_analyze_sweep_reports(pair_files, base_file, tmp_path):
    mods = []
    for method in ("zs", "coop"):
        out = tmp_path / f"{method}.pcmp"
        assert main(["--quiet", "tune", "--base", base_file, "--task", "0", "--method", method, "--epochs", "2",
                     "--out", str(out)]) == 0
        mods.append(str(out))
    reports = tmp_path / "reports"
    assert main(["--quiet", "--threads", "2", "eval", "--pairs", pair_files, "--modules", *mods, "--task", "0",
                 "--report-dir", str(reports)]) == 0
    csv_text = (reports / "compat.csv").read_text()
    assert csv_text.startswith("# fingerprint=")
    assert main(["--quiet", "analyze", "--pairs", pair_files, "--report-dir", str(reports)]) == 0
    assert (reports / "drift.tsv").read_text().count("\n") == 2 + 8
    cfg = write_config(tmp_path, {"tuner": {"coop": {"epochs": 2}}})
    assert main(["--quiet", "--config", cfg, "sweep-depth", "--pairs", pair_files, "--depths", "0..1", "--seeds", "1",
                 "--report-dir", str(reports)]) == 0
    assert json.loads((reports / "depth_sweep.json").read_text())["depths"] == [0, 1]


def test_parse_depths():
    assert parse_depths("0..5", 6) == [0, 1, 2, 3, 4, 5]
    assert parse_depths("0..L-1", 4) == [0, 1, 2, 3]
    assert parse_depths("0,2", 6) == [0, 2]
    assert parse_depths(None, 3) == [0, 1, 2]


def test_default_config_and_parser():
    cfg = load_config(None)
    assert cfg["seeds"] == [0, 1, 2] and cfg["tasks"] == [0, 1, 2, 3, 4]
    args = build_parser().parse_args(["tune", "--base", "b", "--task", "0", "--method", "coop", "--out", "o"])
    assert args.ctx_len is None and args.lam is None
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.json")
