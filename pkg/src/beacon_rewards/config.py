"""Run configuration: a YAML file of documented keys, overridden by flags."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import ConfigDict, Field, ValidationError, field_validator, model_validator

from .chain_sim import SimConfig
from .metrics import REPORTS


class ConfigError(ValueError):
    pass


class RunConfig(SimConfig):
    """Every :class:`SimConfig` key plus where to read and write.

    ``first_epoch``/``last_epoch`` bound the analyzed range; ``last_epoch``
    defaults to the last epoch whose successor state exists.
    ``entity_shares`` generates synthetic deposit/entity files when no
    ``deposits``/``entities`` paths are given.
    """

    model_config = ConfigDict(extra="forbid")

    out: Path = Path("run")
    provider: Literal["sim", "files", "http"] = "files"
    base_url: Optional[str] = None
    deposits: Optional[Path] = None
    entities: Optional[Path] = None
    entity_shares: dict[str, float] = Field(default_factory=dict)
    first_epoch: int = Field(0, ge=0)
    last_epoch: Optional[int] = Field(None, ge=0)
    split_epoch: Optional[int] = Field(None, ge=0)
    reports: list[str] = Field(default_factory=lambda: list(REPORTS))
    ndjson: bool = False

    @field_validator("reports")
    @classmethod
    def _known_reports(cls, v: list[str]) -> list[str]:
        unknown = sorted(set(v) - set(REPORTS))
        if unknown:
            raise ValueError(f"unknown reports {unknown}; choose from {list(REPORTS)}")
        return v

    @field_validator("entity_shares")
    @classmethod
    def _shares(cls, v: dict[str, float]) -> dict[str, float]:
        if any(s < 0 for s in v.values()) or sum(v.values()) > 1.0 + 1e-9:
            raise ValueError("entity shares must be non-negative and sum to at most 1")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> RunConfig:
        if self.provider == "http" and not self.base_url:
            raise ValueError("provider 'http' needs base_url")
        if (self.deposits is None) != (self.entities is None):
            raise ValueError("deposits and entities must be given together")
        if self.last_epoch is not None and self.last_epoch < self.first_epoch:
            raise ValueError("last_epoch precedes first_epoch")
        return self

    @property
    def states_dir(self) -> Path:
        return self.out / "states"

    @property
    def store_dir(self) -> Path:
        return self.out / "store"

    @property
    def report_dir(self) -> Path:
        return self.out / "report"

    @property
    def entities_dir(self) -> Path:
        return self.out / "entities"

    def sim_config(self) -> SimConfig:
        return SimConfig(**{k: getattr(self, k) for k in SimConfig.model_fields})


def _format(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "config"
        lines.append(f"{loc}: {err['msg']}")
    return "\n".join(lines)


def load_config(path: Optional[str | Path], overrides: dict[str, Any]) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data.update(loaded or {})
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def dump_config(config: RunConfig) -> str:
    # ``out`` is omitted so two runs of one config compare byte-equal.
    return yaml.safe_dump(config.model_dump(mode="json", exclude={"out"}), sort_keys=True)
