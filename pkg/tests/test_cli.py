import json

import pytest

from cranio_synth import cli, phantom
from cranio_synth import training as T


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    assert run("phantom", "--n-skulls", 4, "--resolution", 16, "--split-fractions", "0.5,0,0.5", "--seed", 1, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def vae_dir(phantom_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("vae")
    code = run("train", "--data", phantom_dir, "--model-kind", "vae", "--epochs", 60, "--batch-size", 4, "--base-channels", 8, "--seed", 1, "--out", out)
    assert code == 0
    return out


def test_phantom_counts(tmp_path, capsys):
    assert run("phantom", "--n-skulls", 10, "--resolution", 16, "--out", tmp_path) == 0
    data = phantom.load_dataset(tmp_path)
    assert len(data) == 50
    assert "train: 40 samples" in capsys.readouterr().out


def test_phantom_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("phantom", "--n-skulls", 2, "--resolution", 16, "--seed", 7, "--out", tmp_path / name) == 0
    a = {p.name: p.read_bytes() for p in sorted((tmp_path / "a").iterdir())}
    b = {p.name: p.read_bytes() for p in sorted((tmp_path / "b").iterdir())}
    assert a == b


def test_phantom_bad_fractions(tmp_path, capsys):
    assert run("phantom", "--split-fractions", "0.5,0.2,0.2", "--out", tmp_path) == 2
    assert "split_fractions" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"phantom": {"n_skuls": 3}}))
    assert run("phantom", "--config", cfg, "--out", tmp_path) == 2
    assert "phantom.n_skuls" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"phantom": {"n_skulls": 3, "resolution": 16}, "out": str(tmp_path / "from_file")}))
    assert run("phantom", "--config", cfg, "--n-skulls", 2, "--out", tmp_path / "flag") == 0
    assert len(phantom.load_dataset(tmp_path / "flag")) == 10
    assert not (tmp_path / "from_file").exists()


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert run("phantom", "--n-skulls", 2, "--resolution", 16) == 0
    assert (tmp_path / "env" / "manifest.json").exists()


def test_argparse_errors_exit_2():
    assert run("bogus") == 2
    assert run("train", "--model-kind", "gan") == 2


def test_train_requires_data(tmp_path, capsys):
    assert run("train", "--model-kind", "vae", "--out", tmp_path) == 2
    assert "train.data" in capsys.readouterr().err
    assert run("train", "--model-kind", "vae", "--data", tmp_path / "missing", "--out", tmp_path) == 2


def test_train_epochs_flag_overrides_file(phantom_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"model_kind": "wgan_gp", "epochs": 50, "base_channels": 8, "batch_size": 4}}))
    assert run("train", "--config", cfg, "--data", phantom_dir, "--epochs", 1, "--out", tmp_path / "o") == 0
    ckpt = T.load_checkpoint(tmp_path / "o" / "final.ckpt")
    assert ckpt.config.epochs == 1 and ckpt.config.model_kind == "wgan_gp"
    assert (tmp_path / "o" / "loss_trace.csv").exists()


def test_train_hybrid_reports_stages(phantom_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"vae_pretrain_epochs": 1, "latent_feed_epochs": 1, "base_channels": 8, "batch_size": 4}}))
    code = run("train", "--config", cfg, "--data", phantom_dir, "--model-kind", "vae_wgan_gp", "--epochs", 1, "--out", tmp_path / "o")
    assert code == 0
    out = capsys.readouterr().out
    assert [line for line in out.splitlines() if line.startswith("stage")] == [
        "stage 1 started at epoch 0",
        "stage 2 started at epoch 1",
        "stage 3 started at epoch 2",
    ]


def test_generate(vae_dir, tmp_path, capsys):
    ckpt = vae_dir / "final.ckpt"
    assert run("generate", "--checkpoint", ckpt, "--count", 4, "--seed", 3, "--out", tmp_path / "g") == 0
    assert len(phantom.load_dataset(tmp_path / "g")) == 4
    assert "emitted: 4" in capsys.readouterr().out


def test_generate_missing_checkpoint(tmp_path, capsys):
    assert run("generate", "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path) == 2
    assert "not found" in capsys.readouterr().err


def test_generate_corrupt_checkpoint_is_runtime_failure(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"CSCK" + b"\0" * 10)
    assert run("generate", "--checkpoint", bad, "--out", tmp_path / "g") == 1


def test_eval_empty_grid(phantom_dir, tmp_path, capsys):
    assert run("eval", "--real", phantom_dir, "--no-baseline", "--out", tmp_path) == 2
    assert "grid is empty" in capsys.readouterr().err
    assert run("eval", "--real", phantom_dir, "--sizes", "", "--out", tmp_path) == 2


def test_eval_with_synthetic_dataset(phantom_dir, vae_dir, tmp_path, capsys):
    assert run("generate", "--checkpoint", vae_dir / "final.ckpt", "--count", 4, "--out", tmp_path / "g") == 0
    code = run("eval", "--real", phantom_dir, "--generator", f"vae={tmp_path / 'g'}", "--sizes", "2,4", "--vnet-epochs", 1, "--out", tmp_path / "e")
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in lines if line.startswith(("vae", "none"))] == ["vae", "vae", "none"]
    for name in ("seg_report.csv", "summary.csv", "table.txt"):
        assert (tmp_path / "e" / name).exists()


def test_embed(phantom_dir, tmp_path, capsys):
    assert run("embed", "--dataset", f"real={phantom_dir}", "--k", 8, "--out", tmp_path) == 0
    assert "rows: 20 features: 512" in capsys.readouterr().out
    assert (tmp_path / "embedding.csv").exists()
    assert run("embed", "--dataset", "real", "--out", tmp_path) == 2
    assert run("embed", "--out", tmp_path) == 2


def test_interp(vae_dir, tmp_path):
    ckpt = vae_dir / "final.ckpt"
    assert run("interp", "--checkpoint", ckpt, "--steps", 5, "--out", tmp_path) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [f"step_{i:03d}_{c}.vxg" for i in range(5) for c in ("defect", "defective")]
    assert run("interp", "--checkpoint", ckpt, "--steps", 1, "--out", tmp_path) == 2


def test_interp_deterministic(vae_dir, tmp_path):
    ckpt = vae_dir / "final.ckpt"
    for name in ("a", "b"):
        assert run("interp", "--checkpoint", ckpt, "--steps", 3, "--z-seeds", "4,9", "--out", tmp_path / name) == 0
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
