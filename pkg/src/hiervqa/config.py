"""Run configuration: search knobs, refinement schedule, client limits.

Precedence is defaults < config file < CLI flags; the file is a single
JSON document with optional "mcts", "bench", and "client" sections.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MctsConfig:
    """Knobs for the bottom-up tree search."""

    exploration_c: float = 2.0
    expansion_batch: int = 5
    quality_threshold: float = 0.65
    diversity_threshold: float = 0.75
    level_capacities: tuple[int, int, int] = (8, 12, 15)
    max_depth: int = 3
    top_k: int = 10
    iteration_budget: int = 40
    generation_temperature: float = 0.9
    evaluator_temperature: float = 0.0

    def validate(self) -> None:
        if self.exploration_c < 0:
            raise ConfigError("exploration_c must be >= 0")
        if self.expansion_batch < 1:
            raise ConfigError("expansion_batch must be positive")
        for name in ("quality_threshold", "diversity_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if len(self.level_capacities) != 3 or any(c < 1 for c in self.level_capacities):
            raise ConfigError("level_capacities must be 3 positive integers")
        if self.max_depth != 3:
            raise ConfigError("max_depth is fixed at 3")
        if self.top_k < 1:
            raise ConfigError("top_k must be positive")
        if self.iteration_budget < 0:
            raise ConfigError("iteration_budget must be >= 0")


@dataclass(frozen=True)
class BenchConfig:
    """Refinement-loop schedule for top-down chain construction."""

    max_validation_attempts: int = 3
    base_temperature: float = 0.7
    temperature_step: float = 0.2
    temperature_cap: float = 1.2
    validation_temperature: float = 0.0

    def validate(self) -> None:
        if self.max_validation_attempts < 1:
            raise ConfigError("max_validation_attempts must be positive")
        if self.base_temperature < 0 or self.temperature_step < 0:
            raise ConfigError("temperatures must be >= 0")
        if self.temperature_cap < self.base_temperature:
            raise ConfigError("temperature_cap must be >= base_temperature")

    def temperature_for_attempt(self, attempt: int) -> float:
        """Monotone escalation: base + attempt * step, clamped to the cap."""
        return min(self.base_temperature + attempt * self.temperature_step, self.temperature_cap)


@dataclass(frozen=True)
class ClientConfig:
    """Transport limits for the chat-completion backend."""

    timeout_s: float = 60.0
    max_attempts: int = 4
    backoff_base_s: float = 0.5
    requests_per_minute: float | None = None
    max_in_flight: int = 8
    temperature_cap: float = 2.0

    def validate(self) -> None:
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be positive")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be positive")
        if self.requests_per_minute is not None and self.requests_per_minute <= 0:
            raise ConfigError("requests_per_minute must be positive when set")


@dataclass(frozen=True)
class GenerationConfig:
    mcts: MctsConfig = field(default_factory=MctsConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    client: ClientConfig = field(default_factory=ClientConfig)

    def validate(self) -> None:
        self.mcts.validate()
        self.bench.validate()
        self.client.validate()

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mcts"]["level_capacities"] = list(self.mcts.level_capacities)
        return d


def _merge_section(base, overrides: dict[str, Any], section: str):
    known = set(asdict(base))
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    if "level_capacities" in overrides:
        overrides = dict(overrides)
        overrides["level_capacities"] = tuple(overrides["level_capacities"])
    return replace(base, **overrides)


def config_from_dict(data: dict[str, Any], base: GenerationConfig | None = None) -> GenerationConfig:
    base = base or GenerationConfig()
    cfg = GenerationConfig(
        mcts=_merge_section(base.mcts, data.get("mcts", {}), "mcts"),
        bench=_merge_section(base.bench, data.get("bench", {}), "bench"),
        client=_merge_section(base.client, data.get("client", {}), "client"),
    )
    unknown = set(data) - {"mcts", "bench", "client"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> GenerationConfig:
    """Load a layered config file; None yields the documented defaults."""
    if path is None:
        cfg = GenerationConfig()
        cfg.validate()
        return cfg
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)
