"""Configuration management for docrel-desk."""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.core.exceptions import ConfigError

KNOWN_TASKS = ("mvlm", "lrcm", "grcm", "byol")
RELATION_KINDS = ("row", "col", "kv", "order")


def parse_tasks(value: str) -> FrozenSet[str]:
    """Parse a task set such as ``MVLM+LRCM+GRCM`` into its components."""
    parts = [part.strip().lower() for part in str(value).split("+") if part.strip()]
    unknown = [part for part in parts if part not in KNOWN_TASKS]
    if not parts or unknown:
        raise ValueError(f"task set {value!r} must combine {'/'.join(KNOWN_TASKS)} with '+'")
    return frozenset(parts)


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AppSettings(Section):
    """Application settings."""

    name: str = "docrel-desk"
    version: str = "0.1.0"
    log_level: str = "INFO"
    log_file: Optional[str] = None

    @field_validator("log_level")
    @classmethod
    def _check_level(cls, value: str) -> str:
        if value.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError("log_level must be one of DEBUG, INFO, WARNING, ERROR, CRITICAL")
        return value.upper()


class CorpusSettings(Section):
    """Synthetic corpus settings."""

    tables: int = Field(default=300, ge=0)
    forms: int = Field(default=300, ge=0)
    paragraphs: int = Field(default=300, ge=0)
    train_fraction: float = Field(default=0.8, gt=0.0, le=1.0)
    val_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    vocab_size: int = Field(default=200, ge=8)
    max_tokens_per_entity: int = Field(default=4, ge=1)
    patch_size: int = Field(default=8, ge=2)
    table_rows: Tuple[int, int] = (2, 5)
    table_cols: Tuple[int, int] = (2, 5)
    form_pairs: Tuple[int, int] = (1, 8)
    paragraph_sentences: Tuple[int, int] = (2, 12)

    @model_validator(mode="after")
    def _check_ranges(self) -> "CorpusSettings":
        limits = {
            "table_rows": (2, 10),
            "table_cols": (2, 10),
            "form_pairs": (1, 12),
            "paragraph_sentences": (2, 20),
        }
        problems = []
        for name, (low, high) in limits.items():
            lo, hi = getattr(self, name)
            if not low <= lo <= hi <= high:
                problems.append(f"{name} must satisfy {low} <= min <= max <= {high}, got ({lo}, {hi})")
        if self.train_fraction + self.val_fraction > 1.0:
            problems.append("train_fraction + val_fraction must not exceed 1")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class ModelSettings(Section):
    """Encoder and head sizes."""

    hidden: int = Field(default=64, ge=2)
    layers: int = Field(default=2, ge=0)
    heads: int = Field(default=4, ge=1)
    ff_hidden: int = Field(default=128, ge=1)
    max_seq_len: int = Field(default=512, ge=4)
    n_cap: int = Field(default=32, ge=2)
    relation_dim: Optional[int] = Field(default=None, ge=1)
    global_dim: Optional[int] = Field(default=None, ge=1)
    entity_pooling: str = "ent"
    init_scale: float = Field(default=0.02, gt=0.0)

    @field_validator("entity_pooling")
    @classmethod
    def _check_pooling(cls, value: str) -> str:
        if value not in ("ent", "mean"):
            raise ValueError("entity_pooling must be 'ent' or 'mean'")
        return value

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelSettings":
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        return self

    @property
    def d_local(self) -> int:
        return self.relation_dim or max(1, self.hidden // 2)

    @property
    def d_global(self) -> int:
        return self.global_dim or max(1, self.hidden // 2)


class OptimizerSettings(Section):
    optimizer: str = "sgd"
    lr: float = Field(default=1e-3, gt=0.0)
    lr_end_factor: float = Field(default=0.0, ge=0.0, le=1.0)
    grad_clip: float = Field(default=0.0, ge=0.0)
    batch_size: int = Field(default=8, ge=1)

    @field_validator("optimizer")
    @classmethod
    def _check_optimizer(cls, value: str) -> str:
        if value not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        return value


class PretrainSettings(OptimizerSettings):
    """Relational consistency pre-training settings."""

    tasks: str = "mvlm+lrcm+grcm"
    steps: int = Field(default=2000, ge=0)
    tau_ema: float = Field(default=0.99, gt=0.0, lt=1.0)
    tau_ema_end: float = Field(default=1.0, gt=0.0, le=1.0)
    ema_schedule: str = "constant"
    tau_g: float = Field(default=0.5, gt=0.0)
    symmetric: bool = True
    mask_rate: float = Field(default=0.15, gt=0.0, lt=1.0)
    log_every: int = Field(default=50, ge=1)

    @field_validator("tasks")
    @classmethod
    def _check_tasks(cls, value: str) -> str:
        return "+".join(task for task in KNOWN_TASKS if task in parse_tasks(value))

    @field_validator("ema_schedule")
    @classmethod
    def _check_schedule(cls, value: str) -> str:
        if value not in ("constant", "cosine"):
            raise ValueError("ema_schedule must be 'constant' or 'cosine'")
        return value

    @property
    def task_set(self) -> FrozenSet[str]:
        return parse_tasks(self.tasks)


class FinetuneSettings(OptimizerSettings):
    """Relation head fine-tuning settings."""

    optimizer: str = "adam"
    lr_end_factor: float = Field(default=1.0, ge=0.0, le=1.0)
    grad_clip: float = Field(default=1.0, ge=0.0)
    epochs: int = Field(default=50, ge=0)
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    reweight_positives: bool = True
    init_aggregator: str = "pretrained"
    kinds: List[str] = Field(default_factory=lambda: list(RELATION_KINDS))

    @field_validator("init_aggregator")
    @classmethod
    def _check_init(cls, value: str) -> str:
        if value not in ("pretrained", "random"):
            raise ValueError("init_aggregator must be 'pretrained' or 'random'")
        return value

    @field_validator("kinds")
    @classmethod
    def _check_kinds(cls, value: List[str]) -> List[str]:
        unknown = [kind for kind in value if kind not in RELATION_KINDS]
        if unknown:
            raise ValueError(f"unknown relation kinds {unknown}")
        return value


class EvalSettings(Section):
    """Evaluation and ablation settings."""

    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    bleu_max_n: int = Field(default=4, ge=1)
    ablation_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    ablation_tasks: List[str] = Field(default_factory=lambda: ["mvlm", "mvlm+lrcm", "mvlm+lrcm+grcm"])

    @field_validator("ablation_tasks")
    @classmethod
    def _check_tasks(cls, value: List[str]) -> List[str]:
        for tasks in value:
            parse_tasks(tasks)
        return value


class Settings(BaseSettings):
    """Main settings class."""

    seed: int = 0
    output_root: Path = Path("runs")
    app: AppSettings = AppSettings()
    corpus: CorpusSettings = CorpusSettings()
    model: ModelSettings = ModelSettings()
    pretrain: PretrainSettings = PretrainSettings()
    finetune: FinetuneSettings = FinetuneSettings()
    eval: EvalSettings = EvalSettings()

    model_config = SettingsConfigDict(
        env_prefix="RCM_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="forbid",
    )


def _set_dotted(data: Dict[str, Any], key: str, value: Any) -> None:
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ValueError(f"{key}: {part} is not a section")
        node = child
    node[parts[-1]] = value


def load_settings(config_file: Optional[Path] = None, overrides: Sequence[str] = ()) -> Settings:
    """Build settings from an optional YAML file plus ``key.path=value`` overrides.

    Every problem found is reported together in one ``ConfigError``.
    """
    problems: List[str] = []
    data: Dict[str, Any] = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            problems.append(f"config file {path} does not exist")
        else:
            try:
                loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
                if not isinstance(loaded, dict):
                    problems.append(f"config file {path} must contain a mapping")
                else:
                    data = loaded
            except yaml.YAMLError as e:
                problems.append(f"config file {path} is not valid YAML: {e}")

    for override in overrides:
        key, sep, raw = override.partition("=")
        if not sep or not key.strip():
            problems.append(f"override {override!r} must look like section.key=value")
            continue
        try:
            _set_dotted(data, key.strip(), yaml.safe_load(raw) if raw.strip() else raw)
        except ValueError as e:
            problems.append(str(e))

    if problems:
        raise ConfigError(problems)
    try:
        return Settings(**data)
    except ValidationError as e:
        raise ConfigError(
            [f"{'.'.join(str(part) for part in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()]
        ) from None


def derive_settings(config: Settings, overrides: Dict[str, Any]) -> Settings:
    """A validated copy of ``config`` with dotted-key overrides applied."""
    data = config.model_dump()
    try:
        for key, value in overrides.items():
            _set_dotted(data, key, value)
        return Settings(**data)
    except ValidationError as e:
        raise ConfigError(
            [f"{'.'.join(str(part) for part in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()]
        ) from None
    except ValueError as e:
        raise ConfigError([str(e)]) from None


def config_hash(config: Settings) -> str:
    """SHA-256 over the settings that influence results."""
    payload = config.model_dump(mode="json", exclude={"output_root", "app"})
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


# Global settings instance
settings = Settings()


def ensure_directories(config: Settings) -> Path:
    """Ensure the output root exists."""
    root = Path(config.output_root)
    root.mkdir(parents=True, exist_ok=True)
    return root
