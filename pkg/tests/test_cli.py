import pytest

from src.edwh_clipdistill.checkpoint import read_manifest
from src.edwh_clipdistill.cli import _console_hook
from src.edwh_clipdistill.trainer import read_loss_log

from .fixtures import clean_settings  # noqa


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert _console_hook(["generate-data", "--n", "24", "--size", "32", "--out", str(out)]) == 0
    return out


@pytest.fixture
def trained_run(clean_settings, data_dir, tmp_path):
    out = tmp_path / "run"
    args = ["train", "--preset", "tiny", "--set", "total_steps=2", "--data", str(data_dir), "--out", str(out)]
    assert _console_hook([*args, "--deterministic"]) == 0
    return out


def test_generate_data(data_dir):
    assert len((data_dir / "metadata.jsonl").read_text().splitlines()) == 24
    assert len(list((data_dir / "images").iterdir())) == 24


def test_presets(capsys):
    assert _console_hook(["presets"]) == 0

    out = capsys.readouterr().out
    assert "tiny" in out
    assert "vitb16-paper" in out


def test_train(trained_run):
    assert read_manifest(trained_run / "checkpoint")["step"] == 2
    assert [record["step"] for record in read_loss_log(trained_run / "losses.tsv")] == [1, 2]


def test_train_refuses_load_only_preset(clean_settings, tmp_path, capsys):
    assert _console_hook(["train", "--preset", "vitb16-paper", "--out", str(tmp_path)]) == 1
    assert "PresetError" in capsys.readouterr().err


def test_unknown_override(clean_settings, tmp_path, capsys):
    assert _console_hook(["train", "--preset", "tiny", "--set", "nonsense=1", "--out", str(tmp_path)]) == 1
    assert "UnknownConfigKey" in capsys.readouterr().err


def test_evaluation_commands(trained_run, data_dir, tmp_path, capsys):
    ckpt = str(trained_run / "checkpoint")

    assert _console_hook(["eval-retrieval", "--ckpt", ckpt, "--data", str(data_dir)]) == 0
    assert "24 pairs" in capsys.readouterr().out

    assert _console_hook(["eval-zero-shot", "--ckpt", ckpt, "--data", str(data_dir)]) == 0
    assert "overall" in capsys.readouterr().out

    masks = tmp_path / "masks"
    args = ["visualize-masks", "--ckpt", ckpt, "--images", str(data_dir), "--out", str(masks), "--limit", "2"]
    assert _console_hook(args) == 0
    assert len(list(masks.iterdir())) == 6


def test_missing_checkpoint(data_dir, tmp_path, capsys):
    assert _console_hook(["eval-retrieval", "--ckpt", str(tmp_path / "nowhere"), "--data", str(data_dir)]) == 1
    assert "IoError" in capsys.readouterr().err


def test_grad_check(clean_settings, capsys):
    assert _console_hook(["grad-check", "--preset", "tiny", "--n", "6"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_no_command():
    assert _console_hook([]) == 1
