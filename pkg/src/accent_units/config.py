"""Pipeline configuration: one JSON file, validated and defaulted.

Defaults follow the reference setup (500 units, spans of 10, 20% masking,
adapter bottleneck 1024, 30k adapter steps).  Desk-scale runs override them
from the command line or a small config file.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ContractError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PathsConfig(_Section):
    corpus_dir: str = "corpus"
    checkpoints: str = "checkpoints"
    outputs: str = "outputs"


class CorpusConfig(_Section):
    n_standard: int = Field(2000, ge=1)
    n_accented: int = Field(500, ge=1)
    n_words: int = Field(16, ge=1)
    n_clusters: int = Field(50, ge=1)
    apply_prob: float = Field(0.5, ge=0.0, le=1.0)
    feature_dim: int = Field(16, ge=1)


class QuantizerConfig(_Section):
    V: int = Field(500, ge=1)
    iters: int = Field(100, ge=1)
    tol: float = Field(1e-4, ge=0.0)
    n_init: int = Field(4, ge=1)


class EncoderSection(_Section):
    layers: int = Field(6, ge=0)
    model_dim: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    ffn_dim: int = Field(256, ge=1)
    max_len: int = Field(512, ge=1)

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        return self


class SpanSection(_Section):
    span_len: int = Field(10, ge=1)
    p_mask: float = Field(0.2, gt=0.0, lt=1.0)


class ScheduleSection(_Section):
    peak_lr: float = Field(1e-3, gt=0.0)
    warmup_steps: int = Field(100, ge=0)
    steps: int = Field(1000, ge=1)
    batch_size: int = Field(16, ge=1)

    @model_validator(mode="after")
    def _warmup_fits(self):
        if self.warmup_steps > self.steps:
            raise ValueError("warmup_steps exceeds steps")
        return self


class MLMConfig(_Section):
    kind: Literal["count", "neural"] = "count"
    smoothing: float = Field(0.01, gt=0.0)
    max_gap: int = Field(3, ge=1)
    encoder: EncoderSection = EncoderSection()
    span: SpanSection = SpanSection()
    schedule: ScheduleSection = ScheduleSection()


class CorrectorConfig(_Section):
    K: int = Field(10, ge=1)
    p_mask: float = Field(0.2, gt=0.0, lt=1.0)
    variant: Literal["cluster-groups", "phone-groups"] = "cluster-groups"
    fill: Literal["top-m", "fill-all"] = "top-m"
    k0: Optional[int] = Field(None, ge=0)


class AdaptConfig(_Section):
    bottleneck: int = Field(1024, ge=1)
    encoder: EncoderSection = EncoderSection(layers=4, ffn_dim=128, max_len=256)
    span: SpanSection = SpanSection()
    base_schedule: ScheduleSection = ScheduleSection(peak_lr=1.5e-3, warmup_steps=5000,
                                                     steps=30000, batch_size=32)
    schedule: ScheduleSection = ScheduleSection(peak_lr=1.5e-3, warmup_steps=5000,
                                                steps=30000, batch_size=32)


class PipelineConfig(_Section):
    paths: PathsConfig = PathsConfig()
    corpus: CorpusConfig = CorpusConfig()
    quantizer: QuantizerConfig = QuantizerConfig()
    mlm: MLMConfig = MLMConfig()
    corrector: CorrectorConfig = CorrectorConfig()
    adapt: AdaptConfig = AdaptConfig()
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _field_path(loc) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def parse_config(data: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(f"{_field_path(e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ContractError("config", problems) from None


def load_config(path) -> PipelineConfig:
    """Read a JSON config; an empty file yields every default."""
    p = Path(path)
    if not p.exists():
        raise ContractError("config", f"{path}: no such file")
    text = p.read_text(encoding="utf-8")
    if not text.strip():
        return PipelineConfig()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractError("config", f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ContractError("config", f"{path}: top level must be an object")
    return parse_config(data)


def with_overrides(config: PipelineConfig, overrides: dict[str, object]) -> PipelineConfig:
    """Apply dotted-path overrides (``{"corrector.K": 5}``), skipping None values."""
    data = config.model_dump(mode="json")
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *head, last = dotted.split(".")
        for part in head:
            node = node[part]
        node[last] = value
    return parse_config(data)
