import dataclasses

import pytest

from promptseg import (Config, config_from_text, config_hash, config_to_text,
                       desk_config, load_config, save_config, validate_config)
from promptseg.config import ENCODER_STRIDE, with_overrides
from promptseg.errors import InvalidConfig


def test_paper_scale_defaults():
    cfg = validate_config(Config(num_categories=40))
    assert cfg.image_size == 1024
    assert cfg.embed_dim == 256
    assert cfg.num_queries == 25
    assert cfg.tokens_per_part == 1
    assert cfg.feature_size == 64
    assert cfg.encoder_stride == ENCODER_STRIDE == 16
    assert (cfg.alpha, cfg.beta, cfg.lambda_cls, cfg.lambda_reg) == (5.0, 20.0, 10.0, 1.0)
    assert cfg.lr == 1e-4 and cfg.batch_size == 8 and cfg.epochs == 150
    assert cfg.no_part_index == 40


def test_desk_defaults():
    cfg = desk_config(num_categories=3)
    assert cfg.image_size == 128
    assert cfg.embed_dim == 32
    assert cfg.num_queries == 8
    assert cfg.epochs == 30
    assert cfg.feature_size == 8
    assert cfg.token_dim == 32


def test_token_dim_scales_with_tokens_per_part():
    cfg = desk_config(num_categories=3, tokens_per_part=2)
    assert cfg.token_dim == 64


@pytest.mark.parametrize("overrides", [
    {"num_queries": 0},
    {"alpha": -1.0},
    {"beta": -0.5},
    {"image_size": 100},
    {"embed_dim": 12},
    {"tokens_per_part": 3},
    {"mask_threshold": 1.0},
    {"batch_size": 0},
    {"num_categories": 0},
    {"dropout": 1.0},
])
def test_invalid_configs_rejected(overrides):
    base = dataclasses.asdict(desk_config(num_categories=3))
    base.update(overrides)
    with pytest.raises(InvalidConfig):
        validate_config(Config(**base))


def test_text_round_trip_bit_exact():
    cfg = desk_config(num_categories=3, lr=0.000123456789012345, alpha=1/3)
    again = config_from_text(config_to_text(cfg))
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_file_round_trip(tmp_path):
    cfg = desk_config(num_categories=5, seed=99)
    path = tmp_path / "run.cfg"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_config_text_accepts_comments_and_defaults():
    cfg = config_from_text("""
# minimal file
num_categories=4   # inline comment
alpha=10.0
beta=1.0
lambda_cls=5.0
lambda_reg=20.0
""")
    assert cfg.num_categories == 4
    assert (cfg.alpha, cfg.beta, cfg.lambda_cls, cfg.lambda_reg) == (10.0, 1.0, 5.0, 20.0)
    assert cfg.image_size == 1024  # untouched default


def test_config_text_rejects_unknown_and_duplicate_keys():
    with pytest.raises(InvalidConfig, match="unknown"):
        config_from_text("num_categories=3\nnot_a_key=1\n")
    with pytest.raises(InvalidConfig, match="duplicate"):
        config_from_text("num_categories=3\nnum_categories=4\n")
    with pytest.raises(InvalidConfig, match="num_categories"):
        config_from_text("alpha=5.0\n")
    with pytest.raises(InvalidConfig, match="key=value"):
        config_from_text("num_categories\n")


def test_hash_changes_with_any_field():
    cfg = desk_config(num_categories=3)
    assert config_hash(cfg) != config_hash(with_overrides(cfg, seed=1))
    assert config_hash(cfg) != config_hash(with_overrides(cfg, alpha=6.0))


def test_with_overrides_validates():
    cfg = desk_config(num_categories=3)
    with pytest.raises(InvalidConfig):
        with_overrides(cfg, num_queries=-1)
