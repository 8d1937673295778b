import pytest

from src.edwh_clipdistill.config import (
    build_config,
    config_hash,
    ensure_trainable,
    get_settings,
    list_presets,
    load_preset,
    load_train_config,
    masked_count,
    parse_overrides,
    preset,
    registered_presets,
)
from src.edwh_clipdistill.exceptions import (
    DivisibilityError,
    PresetError,
    RangeError,
    UnknownConfigKey,
    VocabularyError,
)
from src.edwh_clipdistill.helpers import deterministic_mode, is_deterministic

from .fixtures import clean_settings  # noqa


def test_mini_derived_quantities():
    cfg = load_preset("mini")

    assert cfg.num_patches == 64
    assert cfg.patch_dim == 192
    assert cfg.masked_count == 32
    assert cfg.vision_head_dim == 32
    assert cfg.text_head_dim == 32
    assert cfg.decoder_head_dim == 32


def test_full_scale_preset():
    cfg = load_preset("vitb16-paper")

    assert cfg.num_patches == 196
    assert cfg.masked_count == 98
    assert cfg.vision_head_dim == 64
    assert cfg.head_out_dim == 8192
    assert cfg.weight_decay == 0.5


def test_masked_count_rounds_up():
    assert masked_count(0.5, 196) == 98
    assert masked_count(0.5, 7) == 4
    assert masked_count(0.3, 10) == 3
    assert masked_count(0.01, 16) == 1

    with pytest.raises(RangeError):
        masked_count(1.0, 16)


def test_patch_size_must_divide_image_size():
    with pytest.raises(DivisibilityError):
        load_train_config(overrides=["image_size=60"])


def test_width_must_divide_into_heads():
    with pytest.raises(DivisibilityError):
        load_train_config(overrides=["vision_width=130"])


@pytest.mark.parametrize("override", ["mask_ratio=0", "mask_ratio=1.0", "lambda_start=1.5", "teacher_temp=0"])
def test_out_of_range_values(override):
    with pytest.raises(RangeError):
        load_train_config(overrides=[override])


def test_vocabulary_must_fit():
    with pytest.raises(VocabularyError):
        load_train_config(overrides=["vocab_size=8"])


def test_unknown_key():
    with pytest.raises(UnknownConfigKey):
        load_train_config(overrides=["not_a_field=1"])

    with pytest.raises(UnknownConfigKey):
        parse_overrides(["lr"])


def test_overrides_are_coerced():
    overrides = parse_overrides(["lr=2e-3", "mask-ratio=0.25", "vision_layers=3", "mask_strategy=random"])

    assert overrides == {"lr": 0.002, "mask_ratio": 0.25, "vision_layers": 3, "mask_strategy": "random"}

    cfg = load_train_config(preset_name="tiny", overrides=["mask_ratio=0.25"])
    assert cfg.mask_ratio == 0.25
    assert cfg.masked_count == 4
    assert cfg.vision_width == 32


def test_config_file(tmp_path):
    path = tmp_path / "train.toml"
    path.write_text("[train]\nvision_layers = 2\nlr = 0.002\nmask_strategy = 'random'\n")

    cfg = load_train_config(path)

    assert cfg.vision_layers == 2
    assert cfg.lr == 0.002
    assert cfg.mask_strategy == "random"
    # untouched fields keep the defaults
    assert cfg.vision_width == 128


def test_config_file_and_preset_are_exclusive(tmp_path):
    path = tmp_path / "train.toml"
    path.write_text("[train]\nvision_layers = 2\n")

    with pytest.raises(PresetError):
        load_train_config(path, "tiny")

    with pytest.raises(FileNotFoundError):
        load_train_config(tmp_path / "missing.toml")


def test_config_hash():
    cfg = load_preset("mini")

    assert len(config_hash(cfg)) == 64
    assert config_hash(cfg) == config_hash(load_train_config())
    assert config_hash(cfg) != config_hash(load_train_config(overrides=["lr=0.01"]))


def test_build_config_keeps_defaults():
    cfg = build_config({"seed": 3})

    assert cfg.seed == 3
    assert cfg.image_size == 64


def test_preset_registry():
    assert list(registered_presets)[:3] == ["mini", "tiny", "vitb16-paper"]

    with pytest.raises(PresetError):
        load_preset("does-not-exist")

    with pytest.raises(PresetError):
        ensure_trainable("vitb16-paper")

    ensure_trainable("tiny")
    ensure_trainable(None)


def test_register_preset():
    @preset
    def very_small_test():
        return {"vision_layers": 1}

    try:
        assert "very-small-test" in registered_presets
        assert load_preset("very-small-test").vision_layers == 1
    finally:
        del registered_presets["very-small-test"]


def test_list_presets():
    table = list_presets()

    for name in ("mini", "tiny", "vitb16-paper"):
        assert name in table


def test_settings(clean_settings):
    settings = get_settings()

    assert settings.clipdistill_log_every == 10
    assert settings.clipdistill_num_threads == 0


def test_deterministic_env(monkeypatch):
    monkeypatch.delenv("CLIPDISTILL_DETERMINISTIC", raising=False)
    assert not is_deterministic()

    monkeypatch.setenv("CLIPDISTILL_DETERMINISTIC", "1")
    assert is_deterministic()


def test_deterministic_mode_restores_torch_settings():
    import torch

    threads = torch.get_num_threads()
    with deterministic_mode():
        assert torch.are_deterministic_algorithms_enabled()
        assert torch.get_num_threads() == 1

    assert torch.get_num_threads() == threads
    assert not torch.are_deterministic_algorithms_enabled()
