import json

import pytest

from stickermatch.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from stickermatch.config import RunConfig, dump_kv, parse_kv, resolve
from stickermatch.errors import ConfigError

# a model and corpus small enough for end-to-end CLI runs in a few seconds
TINY = [
    "data.n_samples=40", "data.n_candidates=6", "data.patch_grid=2", "data.patch_dim=4",
    "data.max_turns=2", "data.max_utterance_len=5",
    "encoder.d_model=16", "encoder.n_heads=2", "encoder.n_layers=1", "encoder.patch_grid=2",
    "encoder.patch_dim=4", "encoder.d_proj=8", "encoder.max_text_len=32",
    "train.batch_size=8", "train.lr=0.001",
]


def sets(*extra):
    out = []
    for kv in TINY + list(extra):
        out += ["--set", kv]
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--out", str(d)] + sets()) == EXIT_OK
    return d


# ------------------------------------------------------------------ config resolution
def test_defaults():
    cfg = RunConfig()
    assert cfg.train.lr == 5e-5 and cfg.train.batch_size == 16 and cfg.train.seed == 42
    assert cfg.data.n_samples == 3000 and cfg.weights.tau == 0.07


def test_precedence_defaults_file_cli(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment line\ntrain.lr = 0.01\ntrain.epochs = 2  # trailing\n")
    cfg = resolve(f, {"train.lr": "0.5"})
    assert cfg.train.lr == 0.5 and cfg.train.epochs == 2 and cfg.train.batch_size == 16


def test_dump_round_trip():
    cfg = RunConfig().with_overrides({"ablation.intra": "false", "train.max_steps": "7"})
    assert resolve(None, parse_kv(dump_kv(cfg))).to_dict() == cfg.to_dict()
    assert cfg.hash() != RunConfig().hash()


@pytest.mark.parametrize("overrides, msg", [
    ({"train.nope": "1"}, "unknown config key"),
    ({"bogus.lr": "1"}, "unknown config section"),
    ({"train.lr": "fast"}, "cannot parse"),
    ({"train.lr": "-1"}, "lr"),
    ({"ablation.intra": "maybe"}, "cannot parse"),
])
def test_bad_overrides(overrides, msg):
    with pytest.raises(ConfigError, match=msg):
        RunConfig().with_overrides(overrides)


def test_malformed_file_line(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("train.lr 0.1\n")
    with pytest.raises(ConfigError, match=":1"):
        resolve(f, {})


# ------------------------------------------------------------------ command line
def test_usage_errors_exit_2(capsys):
    assert main([]) == EXIT_CONFIG
    assert main(["train", "--epochs", "many"]) == EXIT_CONFIG
    assert main(["train", "--set", "train.lr"]) == EXIT_CONFIG
    assert main(["gradcheck", "--threads", "0"]) == EXIT_CONFIG


def test_gen_data_deterministic(tmp_path, data_dir):
    again = tmp_path / "again"
    assert main(["gen-data", "--out", str(again)] + sets()) == EXIT_OK
    for name in ("train.jsonl", "val.jsonl", "test.jsonl"):
        assert (again / name).read_bytes() == (data_dir / name).read_bytes()
    manifest = json.loads((again / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data"


def test_missing_data_exit_3(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nowhere")]) == EXIT_IO
    assert "nowhere" in capsys.readouterr().err


def test_eval_missing_checkpoint_exit_3(tmp_path, data_dir, capsys):
    code = main(["eval", "--data", str(data_dir), "--checkpoint", str(tmp_path / "gone.npz")] + sets())
    assert code == EXIT_IO
    assert "gone.npz" in capsys.readouterr().err


def test_eval_needs_checkpoint_or_untrained(data_dir):
    assert main(["eval", "--data", str(data_dir)] + sets()) == EXIT_CONFIG


def test_unknown_disable_flag(data_dir):
    assert main(["train", "--data", str(data_dir), "--disable", "magic"] + sets()) == EXIT_CONFIG


def test_corrupt_dataset_exit_3(tmp_path, data_dir):
    bad = tmp_path / "bad"
    bad.mkdir()
    for name in ("val.jsonl", "test.jsonl"):
        (bad / name).write_bytes((data_dir / name).read_bytes())
    (bad / "train.jsonl").write_text("{broken\n")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "o")] + sets()) == EXIT_IO


def test_train_eval_resume(tmp_path, data_dir, capsys):
    out = tmp_path / "run"
    args = ["train", "--data", str(data_dir), "--out", str(out), "--epochs", "2"] + sets()
    assert main(args) == EXIT_OK
    stdout = capsys.readouterr().out
    assert "final_loss" in stdout and "best_val_map" in stdout
    for name in ("last.npz", "best.npz", "metrics.tsv", "manifest.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["train"]["epochs"] == 2 and len(manifest["inputs"]) == 2

    assert main(["eval", "--data", str(data_dir), "--checkpoint", str(out / "best.npz"), "--json",
                 "--out", str(tmp_path / "ev")] + sets()) == EXIT_OK
    record = json.loads(capsys.readouterr().out)
    assert 0 < record["map"] <= 1
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text()) == record

    # resuming a finished run is a no-op that reproduces the same final loss line
    assert main(args + ["--resume", str(out / "last.npz")]) == EXIT_OK
    assert "final_loss" in capsys.readouterr().out


def test_eval_untrained_table(data_dir, capsys):
    assert main(["eval", "--data", str(data_dir), "--untrained", "--split", "val"] + sets()) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "MAP\tR10@1\tR10@2\tR10@5" and len(lines[1].split("\t")) == 4


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--max-per-param", "2"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_failure_exit_4(capsys):
    assert main(["gradcheck", "--max-per-param", "2", "--threshold", "1e-30"]) == EXIT_CHECK


def test_ablate_table4_six_records(tmp_path, data_dir, capsys):
    out = tmp_path / "abl"
    code = main(["ablate", "--preset", "table4", "--data", str(data_dir), "--out", str(out),
                 "--seeds", "1"] + sets("train.max_steps=1"))
    assert code == EXIT_OK
    records = [json.loads(line) for line in (out / "ablation.jsonl").read_text().splitlines()]
    assert len(records) == 6
    assert {r["key"] for r in records} == {"11111101", "11111011", "11110111", "11101111", "11011101",
                                           "11111111"}
