"""Configuration: the single owner of every pipeline hyperparameter.

All weights entering the matching cost and the training loss (alpha, beta,
lambda_cls, lambda_reg, num_queries) live here and are read from nowhere else.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .errors import InvalidConfig

# The frozen encoder reduces the image by this factor (1024 -> 64 geometry).
ENCODER_STRIDE = 16


@dataclass(frozen=True)
class Config:
    num_categories: int
    image_size: int = 1024
    embed_dim: int = 256
    tokens_per_part: int = 1
    num_queries: int = 25
    # Matching-cost and loss weights; defaults are the best ablation row
    # (alpha=5, beta=20, lambda_cls=10, lambda_reg=1).  The alternative
    # assignment alpha=10, beta=1, lambda_cls=5, lambda_reg=20 is selectable
    # through a config file.
    alpha: float = 5.0
    beta: float = 20.0
    lambda_cls: float = 10.0
    lambda_reg: float = 1.0
    encoder_layers: int = 6
    decoder_layers: int = 6
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 150
    eos_weight: float = 1.0
    mask_threshold: float = 0.5
    seed: int = 0
    dropout: float = 0.0
    cls_head_layers: int = 3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    @property
    def encoder_stride(self) -> int:
        return ENCODER_STRIDE

    @property
    def feature_size(self) -> int:
        """Side length of the encoder's feature map."""
        return self.image_size // ENCODER_STRIDE

    @property
    def token_dim(self) -> int:
        """Width of one prompt token group: tokens_per_part * embed_dim."""
        return self.tokens_per_part * self.embed_dim

    @property
    def model_dim(self) -> int:
        """Internal width of the student prompter (kept equal to embed_dim)."""
        return self.embed_dim

    @property
    def no_part_index(self) -> int:
        """Class index of the padding category (last index)."""
        return self.num_categories


def desk_config(**overrides) -> Config:
    """A small configuration that trains in minutes on a CPU.

    The training recipe (lr, batch size, no-part class weight, Adam betas)
    is the best one found for this scale; the loss weights stay at the
    full-scale defaults.
    """
    base = dict(
        num_categories=3,
        image_size=128,
        embed_dim=32,
        num_queries=8,
        epochs=30,
        lr=1e-3,
        batch_size=2,
        eos_weight=0.1,
        adam_beta2=0.99,
    )
    base.update(overrides)
    return validate_config(Config(**base))


def validate_config(cfg: Config) -> Config:
    """Check every invariant; returns the config unchanged if all hold.

    Raises InvalidConfig naming the first violated constraint.
    """

    def require(cond: bool, message: str) -> None:
        if not cond:
            raise InvalidConfig(message)

    require(cfg.num_categories >= 1, "num_categories must be >= 1")
    require(cfg.image_size >= 64 and cfg.image_size % 64 == 0,
            "image_size must be a positive multiple of 64 "
            "(stride-16 encoder followed by two stride-2 convolutions)")
    require(cfg.embed_dim >= 8 and cfg.embed_dim % 8 == 0,
            "embed_dim must be >= 8 and divisible by 8 (8 attention heads)")
    require(cfg.tokens_per_part in (1, 2), "tokens_per_part must be 1 or 2")
    require(cfg.num_queries >= 1, "num_queries must be >= 1")
    for name in ("alpha", "beta", "lambda_cls", "lambda_reg", "eos_weight"):
        require(getattr(cfg, name) >= 0.0, f"{name} must be >= 0")
    require(cfg.encoder_layers >= 1, "encoder_layers must be >= 1")
    require(cfg.decoder_layers >= 1, "decoder_layers must be >= 1")
    require(cfg.lr >= 0.0, "lr must be >= 0")
    require(cfg.batch_size >= 1, "batch_size must be >= 1")
    require(cfg.epochs >= 0, "epochs must be >= 0")
    require(0.0 < cfg.mask_threshold < 1.0, "mask_threshold must be in (0, 1)")
    require(cfg.seed >= 0, "seed must be >= 0")
    require(0.0 <= cfg.dropout < 1.0, "dropout must be in [0, 1)")
    require(cfg.cls_head_layers >= 1, "cls_head_layers must be >= 1")
    require(0.0 <= cfg.adam_beta1 < 1.0, "adam_beta1 must be in [0, 1)")
    require(0.0 <= cfg.adam_beta2 < 1.0, "adam_beta2 must be in [0, 1)")
    require(cfg.adam_eps > 0.0, "adam_eps must be > 0")
    return cfg


_INT_FIELDS = {f.name for f in fields(Config) if f.type == "int"}


def config_to_text(cfg: Config) -> str:
    """Serialize to the flat key=value format (one field per line).

    Floats are written with repr() so parsing round-trips bit-exactly.
    """
    lines = ["# promptseg configuration"]
    for f in fields(Config):
        lines.append(f"{f.name}={getattr(cfg, f.name)!r}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> Config:
    """Parse the key=value format; unknown keys are errors, missing keys
    fall back to defaults."""
    known = {f.name for f in fields(Config)}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in known:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise InvalidConfig(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = int(value) if key in _INT_FIELDS else float(value)
        except ValueError as exc:
            raise InvalidConfig(f"line {lineno}: bad value for {key!r}: {value!r}") from exc
    if "num_categories" not in values:
        raise InvalidConfig("num_categories is required")
    return validate_config(Config(**values))


def save_config(cfg: Config, path) -> None:
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg))


def load_config(path) -> Config:
    with open(path) as fh:
        return config_from_text(fh.read())


def config_hash(cfg: Config) -> str:
    """Stable hex digest of the full configuration."""
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()


def with_overrides(cfg: Config, **kwargs) -> Config:
    return validate_config(replace(cfg, **kwargs))
