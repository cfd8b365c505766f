"""Run configuration: built-in defaults < ``key = value`` config file < command-line flags."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any

from .model import ModelConfig
from .pretrain import PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_dir: str = "."
    records: str | None = None
    out_dir: str = "out"
    seed: int = 0
    epochs: int | None = None  # stage default: pretrain 30, finetune 50
    batch_size: int = 256
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_items: int = 50
    max_attrs: int = 10
    dropout: float = 0.2
    lr: float | None = None  # stage default: pretrain 1e-3, finetune 1e-4
    mask_prob: float = 0.2
    sub_prob: float = 0.5
    sad_prob: float = 0.2
    lambda_mip: float = 1.0
    lambda_sad: float = 1.0
    sad_raw_attributes: bool = False
    neg_policy: str = "generator"
    top_k: int = 100
    finetune_neg_policy: str = "uniform"
    gen_epochs: int = 50
    gen_lr: float = 1e-3
    train_generator: bool = True
    generator: str | None = None
    checkpoint: str | None = None
    patience: int = 5
    clip: float = 0.1
    eval_seed: int | None = None
    model_name: str | None = None
    oracle: bool = False
    # simulation
    reject_filters: bool = False
    max_asks: int = 15
    # synthetic data
    num_users: int = 200
    num_items: int = 500
    num_attrs: int = 40
    attrs_per_item: int = 4
    sessions_per_user: int = 8
    history_per_user: int = 12

    def model_config(self) -> ModelConfig:
        return ModelConfig(dim=self.dim, layers=self.layers, heads=self.heads,
                           max_items=self.max_items, max_attrs=self.max_attrs,
                           dropout=self.dropout)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(mask_prob=self.mask_prob, sub_prob=self.sub_prob,
                              sad_prob=self.sad_prob, lambda_mip=self.lambda_mip,
                              lambda_sad=self.lambda_sad, batch_size=self.batch_size,
                              clip=self.clip, sad_raw_attributes=self.sad_raw_attributes)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value: str):
    kind = _FIELDS[name].type
    if value.lower() in ("none", "") and "None" in str(kind):
        return None
    if "bool" in str(kind):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if "int" in str(kind) and "float" not in str(kind):
            return int(value)
        if "float" in str(kind):
            return float(value)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r}") from None
    return value


def read_config_file(path) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment; keys may use dashes."""
    out: dict[str, Any] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (x.strip() for x in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce(key, value)
    return out


def resolve(file_values: dict[str, Any] | None, flag_values: dict[str, Any]) -> RunConfig:
    """Merge with precedence flag > file > built-in default."""
    merged = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in flag_values.items() if k in _FIELDS})
    cfg = RunConfig(**merged)
    if cfg.neg_policy not in ("uniform", "generator"):
        raise ConfigError(f"neg_policy must be uniform or generator, not {cfg.neg_policy!r}")
    if cfg.finetune_neg_policy not in ("uniform", "generator"):
        raise ConfigError("finetune_neg_policy must be uniform or generator")
    return cfg
