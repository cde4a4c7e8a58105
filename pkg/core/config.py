import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.errors import ConfigurationError

logger = logging.getLogger(__name__)

NUM_SPECIALS = 5

M = TypeVar("M", bound=BaseModel)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(StrictModel):
    num_layers: int = Field(12, ge=0)
    hidden_size: int = Field(768, gt=0)
    num_heads: int = Field(12, gt=0)
    ffn_size: int = Field(3072, gt=0)
    vocab_size: int = Field(4096, gt=0)
    max_positions: int = Field(512, ge=2)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    attention_dropout: float = Field(0.1, ge=0.0, lt=1.0)
    layer_norm_eps: float = Field(1e-5, gt=0.0)
    pad_id: int = 1

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def position_rows(self) -> int:
        # positions are offset past the pad id
        return self.max_positions + self.pad_id + 1

    def check_tokenizer(self, tokenizer_size: int) -> None:
        if tokenizer_size < 256 + NUM_SPECIALS:
            raise ConfigurationError(f"Tokenizer has {tokenizer_size} entries, below the byte alphabet plus specials")
        if self.vocab_size != tokenizer_size:
            raise ConfigurationError(
                f"Model vocab_size {self.vocab_size} does not match tokenizer size {tokenizer_size}"
            )

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ModelConfig":
        presets = {
            "base": dict(num_layers=12, hidden_size=768, num_heads=12, ffn_size=3072),
            "large": dict(num_layers=24, hidden_size=1024, num_heads=16, ffn_size=4096),
            "toy": dict(num_layers=2, hidden_size=64, num_heads=4, ffn_size=128, max_positions=130),
        }
        if name not in presets:
            raise ConfigurationError(f"Unknown model preset {name!r}")
        return cls(**{**presets[name], **overrides})


class TrainSchedule(StrictModel):
    total_updates: int = Field(100_000, gt=0)
    warmup_updates: int = Field(10_000, ge=0)
    peak_lr: float = Field(4e-4, gt=0.0)
    end_lr: float = Field(0.0, ge=0.0)
    power: float = Field(1.0, gt=0.0)
    batch_sequences: int = Field(8000, gt=0)
    micro_batch: int = Field(16, gt=0)
    seq_len: int = Field(512, ge=3)
    mask_prob: float = Field(0.15, gt=0.0, lt=1.0)
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    seed: int = 1

    @model_validator(mode="after")
    def check_shape(self) -> "TrainSchedule":
        if self.warmup_updates >= self.total_updates:
            raise ValueError("warmup_updates must be smaller than total_updates")
        if self.peak_lr <= self.end_lr:
            raise ValueError("peak_lr must exceed end_lr")
        return self

    @property
    def tokens_per_update(self) -> int:
        return self.batch_sequences * self.seq_len

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "TrainSchedule":
        presets = {
            "base": dict(total_updates=100_000, warmup_updates=10_000, peak_lr=4e-4),
            "large": dict(total_updates=100_000, warmup_updates=10_000, peak_lr=1.5e-4),
            "desk": dict(
                total_updates=2000, warmup_updates=200, peak_lr=5e-4,
                batch_sequences=64, micro_batch=16, seq_len=128,
            ),
        }
        if name not in presets:
            raise ConfigurationError(f"Unknown schedule preset {name!r}")
        return cls(**{**presets[name], **overrides})


class GridSpec(StrictModel):
    batch_sizes: List[int] = Field(default_factory=lambda: [16, 32])
    learning_rates: List[float] = Field(default_factory=lambda: [5e-6, 7e-6, 1e-5, 2e-5, 5e-5])
    max_epochs: int = Field(30, gt=0)
    patience: int = Field(3, gt=0)
    warmup_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    seed: int = 1
    workers: int = Field(1, gt=0)

    @model_validator(mode="after")
    def check_grid(self) -> "GridSpec":
        if not self.batch_sizes or not self.learning_rates:
            raise ValueError("Grid needs at least one batch size and one learning rate")
        if any(b <= 0 for b in self.batch_sizes) or any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("Batch sizes and learning rates must be positive")
        return self

    @property
    def configs(self) -> List[Tuple[int, float]]:
        return [(b, lr) for b in self.batch_sizes for lr in self.learning_rates]

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "GridSpec":
        seeds = {"base": 1, "large": 42}
        if name not in seeds:
            raise ConfigurationError(f"Unknown grid preset {name!r}")
        return cls(**{"seed": seeds[name], **overrides})


class TokenizerParams(StrictModel):
    vocab_size: int = Field(4096, gt=256 + NUM_SPECIALS)
    sample_bytes: Optional[int] = Field(None, gt=0)
    seed: int = 1


class CorpusParams(StrictModel):
    shard_bytes: int = Field(64 * 1024 * 1024, gt=0)
    valid_fraction: float = Field(0.01, gt=0.0, lt=1.0)
    seed: int = 1
    workers: int = Field(4, gt=0)


class Overlength(str, Enum):
    skip = "skip"
    error = "error"


class EvalParams(StrictModel):
    length_normalize: bool = False
    overlength: Overlength = Overlength.skip
    batch_size: int = Field(64, gt=0)


class Stage(str, Enum):
    corpus = "corpus"
    tokenizer = "tokenizer"
    pretrain = "pretrain"
    finetune = "finetune"
    eval = "eval"
    report = "report"
    synth = "synth"


class RunConfig(StrictModel):
    stage: Optional[Stage] = None
    seed: Optional[int] = None
    out: Optional[Path] = None
    paths: Dict[str, Path] = Field(default_factory=dict)
    model: Optional[ModelConfig] = None
    schedule: Optional[TrainSchedule] = None
    grid: Optional[GridSpec] = None
    tokenizer: Optional[TokenizerParams] = None
    corpus: Optional[CorpusParams] = None
    eval: Optional[EvalParams] = None


def load_run_config(path: Path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigurationError(f"Cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Config {path} is not valid YAML: {e}") from e
    return parse_run_config(raw, source=str(path))


def parse_run_config(raw: Dict[str, Any], source: str = "<config>") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError(f"Config {source} must be a mapping")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(p) for p in first["loc"])
        raise ConfigurationError(f"{source}: {location}: {first['msg']}") from e


def dump_run_config(config: RunConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json", exclude_none=True)


def merge_params(cls: Type[M], base: Optional[BaseModel] = None, **overrides: Any) -> M:
    "base values, then every override that is not None"
    values = base.model_dump() if base is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(p) for p in first["loc"])
        raise ConfigurationError(f"{cls.__name__}: {location}: {first['msg']}") from e
