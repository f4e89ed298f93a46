"""Environment settings and the validated run configuration.

Run configuration lives in a sectioned ``key = value`` file::

    [model]
    d_v = 8
    projector = hybrid

Every key is optional; unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import math
import os
import re
from emomoe._compat import StrEnum
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from emomoe.compressor import ProjectorKind
from emomoe.errors import ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=os.environ.get("ENV_FILE", ".env"),
        env_file_encoding="utf-8",
        env_prefix="EMOMOE_",
        extra="ignore",
    )

    output_dir: str = Field(default="runs")
    ledger_path: str = Field(default="runs/ledger.db")
    log_level: str = Field(default="INFO")

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    @property
    def ledger_full_path(self) -> Path:
        return Path(self.ledger_path)


_settings: Settings | None = None


def get_settings() -> Settings:
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def reset_settings() -> None:
    global _settings
    _settings = None


# -- run configuration --


class FinetuneStrategy(StrEnum):
    LORA = "lora"
    FULL = "full"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Section):
    d_v: int = Field(default=8, ge=1)
    d_t: int = Field(default=16, ge=1)
    d_h: int = Field(default=32, ge=1)
    d_ff: int = Field(default=32, ge=1)
    n1: int = Field(default=16, ge=1)
    m: int = Field(default=4, ge=1)
    classes: int = Field(default=4, ge=2)
    k: int = Field(default=4, ge=1)
    patch: int = Field(default=4, ge=1)
    vocab: int = Field(default=32, ge=1)
    projector: ProjectorKind = ProjectorKind.HYBRID
    ln_eps: float = Field(default=1e-5, gt=0)

    @property
    def n2(self) -> int:
        return -(-self.n1 // self.k)

    @property
    def d_in(self) -> int:
        return self.k * self.d_v


class DataConfig(_Section):
    n: int = Field(default=2000, ge=1)
    n_eval: int = Field(default=400, ge=1)
    label_noise: float = Field(default=0.05, ge=0, lt=1)
    emotion_fraction: float = Field(default=0.5, ge=0, le=1)
    face_tokens: int = Field(default=4, ge=1)
    noise: float = Field(default=0.1, ge=0)
    clips: int = Field(default=0, ge=0)
    clip_frames: int = Field(default=4, ge=1)


class OptimizerConfig(_Section):
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.95, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=0.1, ge=0)
    warmup_ratio: float = Field(default=0.01, ge=0, le=1)
    batch_size: int = Field(default=16, ge=1)


class ScheduleConfig(_Section):
    epochs_stage1: int = Field(default=1, ge=0)
    epochs_stage2: int = Field(default=1, ge=0)
    epochs_stage3: int = Field(default=3, ge=0)
    epochs_finetune: int = Field(default=5, ge=0)
    lr_pretrain: float = Field(default=0.01, gt=0)
    lr_finetune: float = Field(default=0.01, gt=0)
    stage3_train_embedder: bool = True
    finetune_strategy: FinetuneStrategy = FinetuneStrategy.LORA


class SeedConfig(_Section):
    init: int = Field(default=0, ge=0)
    data: int = Field(default=7, ge=0)
    train: int = Field(default=7, ge=0)


class FecConfig(_Section):
    tau: float = Field(default=0.9, gt=0, le=1)
    active: bool = True


class LoraConfig(_Section):
    rank: int = Field(default=4, ge=1)
    alpha: float = Field(default=4.0, ge=0)
    dropout: float = Field(default=0.05, ge=0, lt=1)
    adapters: list[str] = Field(default_factory=lambda: ["ver", "dfew"])

    @field_validator("adapters", mode="before")
    @classmethod
    def _split(cls, v: Any) -> Any:
        if isinstance(v, str):
            return [s.strip() for s in v.split(",") if s.strip()]
        return v

    @field_validator("adapters")
    @classmethod
    def _names(cls, v: list[str]) -> list[str]:
        for name in v:
            if not re.fullmatch(r"[A-Za-z0-9_.-]+", name):
                raise ValueError(f"adapter name {name!r} may only use letters, digits, '_', '.', '-'")
        if len(set(v)) != len(v):
            raise ValueError("adapter names must be unique")
        return v


class _InvariantViolation(ValueError):
    def __init__(self, section: str, key: str, message: str) -> None:
        super().__init__(f"[{section}] {key}: {message}")
        self.section = section
        self.key = key


class RunConfig(_Section):
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    fec: FecConfig = Field(default_factory=FecConfig)
    lora: LoraConfig = Field(default_factory=LoraConfig)

    @model_validator(mode="after")
    def _cross_checks(self) -> RunConfig:
        m = self.model
        if self.lora.rank > min(m.d_t, m.d_ff):
            raise _InvariantViolation(
                "lora", "rank", f"{self.lora.rank} exceeds min(d_t, d_ff) = {min(m.d_t, m.d_ff)}"
            )
        need = signature_axes(m.classes)
        if m.d_v < need:
            raise _InvariantViolation(
                "model", "d_v", f"{m.d_v} leaves no room for {need} synthetic signature axes"
            )
        if self.data.face_tokens > m.n1:
            raise _InvariantViolation(
                "data", "face_tokens", f"{self.data.face_tokens} exceeds n1 = {m.n1}"
            )
        return self

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_ini(self) -> str:
        lines: list[str] = []
        for section, values in self.model_dump(mode="json").items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                if isinstance(value, list):
                    value = ",".join(value)
                elif isinstance(value, bool):
                    value = str(value).lower()
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def signature_axes(classes: int) -> int:
    """Embedding axes the synthetic generator reserves: markers, arc plane and polarity code."""
    return 4 + math.ceil(math.log2(classes))


def derived_values(cfg: RunConfig) -> dict[str, Any]:
    m, d = cfg.model, cfg.data
    n_emotion = round(d.n * d.emotion_fraction)
    batches = {
        "stage1": -(-(d.n - n_emotion) // cfg.optimizer.batch_size),
        "stage2": -(-n_emotion // cfg.optimizer.batch_size),
        "stage3": -(-d.n // cfg.optimizer.batch_size),
        "finetune": -(-n_emotion // cfg.optimizer.batch_size),
    }
    epochs = {
        "stage1": cfg.schedule.epochs_stage1,
        "stage2": cfg.schedule.epochs_stage2,
        "stage3": cfg.schedule.epochs_stage3,
        "finetune": cfg.schedule.epochs_finetune,
    }
    out: dict[str, Any] = {
        "n2": m.n2,
        "n1_padded": m.n2 * m.k,
        "d_in": m.d_in,
        "total_steps": {stage: batches[stage] * epochs[stage] for stage in batches},
    }
    if m.n1 % m.k:
        out["note"] = f"n1={m.n1} is padded to {m.n2 * m.k} by repeating the last token (k={m.k})"
    return out


def _key_lines(text: str) -> dict[tuple[str, str | None], int]:
    """Line number of every section header and key, for error messages."""
    lines: dict[tuple[str, str | None], int] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        header = re.fullmatch(r"\[([^\]]+)\]", line)
        if header:
            section = header.group(1).strip()
            lines.setdefault((section, None), lineno)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        lines.setdefault((section, key), lineno)
    return lines


def parse_config(path: Path | None = None) -> RunConfig:
    """Read and validate a run configuration; ``None`` yields the defaults."""
    if path is None:
        cfg = RunConfig()
        _echo(cfg, "<defaults>")
        return cfg
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        lineno = getattr(e, "lineno", None)
        where = f"{path}:{lineno}" if lineno else str(path)
        raise ConfigError(f"{where}: {e.message}") from e

    raw = {section: dict(parser.items(section)) for section in parser.sections()}
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise _config_error(path, e, _key_lines(text)) from None
    _echo(cfg, str(path))
    return cfg


def _config_error(
    path: Path, exc: ValidationError, lines: dict[tuple[str, str | None], int]
) -> ConfigError:
    err = exc.errors()[0]
    loc = [str(part) for part in err["loc"]]
    cause = err.get("ctx", {}).get("error")
    if isinstance(cause, _InvariantViolation):
        section, key, msg = cause.section, cause.key, str(cause)
    else:
        section = loc[0] if loc else ""
        key = loc[1] if len(loc) > 1 else ""
        if err["type"] == "extra_forbidden":
            msg = f"[{section}] {key}: unknown key" if key else f"[{section}]: unknown section"
        else:
            msg = f"[{section}] {key}: {err['msg']}"
    lineno = lines.get((section, key or None)) or lines.get((section, None))
    where = f"{path}:{lineno}" if lineno else str(path)
    return ConfigError(f"{where}: {msg}")


def _echo(cfg: RunConfig, source: str) -> None:
    derived = derived_values(cfg)
    logger.info(
        "Config %s: projector=%s n2=%d d_in=%d hash=%s",
        source,
        cfg.model.projector,
        derived["n2"],
        derived["d_in"],
        cfg.config_hash()[:12],
    )
    if "note" in derived:
        logger.warning("%s", derived["note"])
