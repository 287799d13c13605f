import json

import pytest

from auxgan import cli
from auxgan.config import dump_config, load_config
from auxgan.errors import InvalidConfigError, NonFiniteLossError
from auxgan.phantom import file_digest

SMOKE_YAML = """
train:
  epochs: 2
  iters_per_epoch: 3
  batch_size: 2
  checkpoint_every: 3
  disc_base_width: 4
  generator: {base_width: 4}
  augment: {crop_size: 64, pad_size: 72}
eval:
  kid_block_size: 2
"""


@pytest.fixture
def smoke_config(tmp_path):
    p = tmp_path / "smoke.yaml"
    p.write_text(SMOKE_YAML)
    return p


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-data", "--n-paired", "4", "--n-ct", "6", "--resolution", "64", "--seed", "2",
                     "--eval-fraction", "0.5", "--out", str(out)]) == 0
    return out


def test_load_config_overrides_and_hash(smoke_config):
    cfg = load_config(smoke_config, {"train.model": "pixcm", "train.seed": 4})
    assert cfg.train.model == "pixcm" and cfg.train.seed == 4
    assert cfg.train.objective.lambda_l1 == 100
    assert cfg.train.generator.base_width == 4
    again = load_config(smoke_config, {"train.model": "pixcm", "train.seed": 4, "out": "elsewhere"})
    assert again.config_hash() == cfg.config_hash()


def test_unknown_keys_rejected(tmp_path):
    for text in ("bogus: 1\n", "train: {lamda: 3}\n", "train: {generator: {widht: 3}}\n", "schema_version: 9\n"):
        p = tmp_path / "c.yaml"
        p.write_text(text)
        with pytest.raises(InvalidConfigError):
            load_config(p)


def test_dump_config_echoes_hash(tmp_path, smoke_config):
    cfg = load_config(smoke_config)
    dump_config(cfg, tmp_path / "run.json")
    d = json.loads((tmp_path / "run.json").read_text())
    assert d["config_hash"] == cfg.config_hash()


def test_gen_data(cli_data, tmp_path):
    m = json.loads((cli_data / "manifest.json").read_text())
    assert len(m["cases"]) == 10
    again = tmp_path / "again"
    cli.main(["gen-data", "--n-paired", "4", "--n-ct", "6", "--resolution", "64", "--seed", "2",
              "--eval-fraction", "0.5", "--out", str(again)])
    assert file_digest(again / "manifest.json") == file_digest(cli_data / "manifest.json")


def test_gen_data_requires_out(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-data", "--n-paired", "2"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_gen_data_bad_resolution(tmp_path, capsys):
    assert cli.main(["gen-data", "--resolution", "16", "--out", str(tmp_path)]) == 2
    assert "resolution" in capsys.readouterr().err


def test_train_evaluate_resume(cli_data, smoke_config, tmp_path):
    run = tmp_path / "run"
    args = ["train", "--model", "pixmc", "--config", str(smoke_config), "--data", str(cli_data), "--out", str(run)]
    assert cli.main(args) == 0
    ckpt = run / "checkpoints" / "final.pt"
    assert ckpt.exists()
    assert json.loads((run / "run_config.json").read_text())["train"]["model"] == "pixmc"

    # resume from the mid-run checkpoint reproduces the log
    resumed = tmp_path / "resumed"
    args_r = ["train", "--model", "pixmc", "--config", str(smoke_config), "--data", str(cli_data),
              "--out", str(resumed), "--resume", str(run / "checkpoints" / "step_000003.pt")]
    assert cli.main(args_r) == 0
    assert (resumed / "losses.jsonl").read_bytes() == (run / "losses.jsonl").read_bytes()

    ev = tmp_path / "ev"
    assert cli.main(["evaluate", "--checkpoint", str(ckpt), "--config", str(smoke_config),
                     "--data", str(cli_data), "--out", str(ev)]) == 0
    rep = json.loads((ev / "metrics.json").read_text())
    assert rep["direction"] == "MR->CT"
    # every requested HU label is either scored or reported as excluded
    assert {int(k) for k in rep["hu_per_label"]} | set(rep["hu_excluded"]) == {1, 2, 3, 4}
    assert (ev / "metrics.csv").exists()


def test_evaluate_identity(cli_data, smoke_config, tmp_path):
    assert cli.main(["evaluate", "--checkpoint", "identity", "--config", str(smoke_config),
                     "--data", str(cli_data), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "metrics.json").read_text())
    assert rep["fid"] == pytest.approx(0.0, abs=1e-6)
    assert rep["dice_mean"] == 1.0


def test_evaluate_missing_checkpoint(cli_data, tmp_path):
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "nope.pt"), "--data", str(cli_data),
                     "--out", str(tmp_path)]) == 2


def test_train_needs_ct_for_pixcm(tmp_path, smoke_config):
    data = tmp_path / "d"
    cli.main(["gen-data", "--n-paired", "4", "--n-ct", "1", "--resolution", "64", "--eval-fraction", "0.6",
              "--out", str(data)])
    assert cli.main(["train", "--model", "pixcm", "--config", str(smoke_config), "--data", str(data),
                     "--out", str(tmp_path / "r")]) == 2
    assert not (tmp_path / "r").exists()  # nothing written before validation


def test_train_unknown_config_key(tmp_path, cli_data):
    p = tmp_path / "bad.yaml"
    p.write_text("train: {epochz: 3}\n")
    assert cli.main(["train", "--model", "pixmc", "--config", str(p), "--data", str(cli_data)]) == 2


def test_train_nan_exit_code(cli_data, smoke_config, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteLossError("non-finite loss", {})

    monkeypatch.setattr("auxgan.trainer.train", boom)
    assert cli.main(["train", "--model", "pixmc", "--config", str(smoke_config), "--data", str(cli_data),
                     "--out", str(tmp_path)]) == 3


def test_ablate_writes_table(cli_data, smoke_config, tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--model", "pixmc", "--config", str(smoke_config), "--data", str(cli_data),
                     "--out", str(out), "--epochs", "1", "--iters", "2"]) == 0
    rows = (out / "ablation.csv").read_text().strip().splitlines()
    assert len(rows) == 4
    assert [r.split(",")[0] for r in rows[1:]] == ["L1", "GAN", "GAN+lambda*L1"]


def test_out_env_fallback(cli_data, smoke_config, tmp_path, monkeypatch):
    monkeypatch.setenv("AUXGAN_OUT", str(tmp_path / "env"))
    assert cli.main(["evaluate", "--checkpoint", "identity", "--config", str(smoke_config),
                     "--data", str(cli_data)]) == 0
    assert (tmp_path / "env" / "metrics.json").exists()
