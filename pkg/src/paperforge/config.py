"""Run configuration shared by all pipeline stages.

Config files are flat UTF-8 ``key=value`` lines with dotted section
prefixes; CLI overrides win over file values. The ablation mode implies
stage toggles, and combinations that contradict the mode are rejected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from .inference import MODES

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """A config file or override names a bad key or value."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class RunConfig:
    backend: str = "http"
    mock_script: str | None = None
    model: str = "gpt-4o-mini"
    api_base: str | None = None
    embedder: str = "local"
    embedder_model: str = "text-embedding-3-small"
    rounds: int = 3
    threshold: float = 4.0
    reply_scale: tuple[float, float] | None = None
    k: int = 8
    mode: str = "full"
    filter_enabled: bool | None = None
    integrator_enabled: bool | None = None
    token_budget: int = 1200
    runs: int = 3
    tau: float = 0.5
    precision_mode: str = "prose"
    cutoff: date = date(2024, 9, 1)
    seed: int = 0
    workers: int = 1
    in_flight_cap: int = 4
    warnings: list[str] = field(default_factory=list)

    @property
    def retrieval_on(self) -> bool:
        return self.mode != "no_rag"

    @property
    def filter_on(self) -> bool:
        return self.mode in ("filter", "full")

    @property
    def integrator_on(self) -> bool:
        return self.mode == "full"

    def make_backend(self):
        from .gateway import HttpBackend, MockBackend

        if self.backend == "mock":
            if not self.mock_script:
                raise ConfigError("backend.script", "mock backend needs a script path")
            return MockBackend.from_file(self.mock_script)
        return HttpBackend(
            base_url=self.api_base, model=self.model, in_flight_cap=self.in_flight_cap
        )

    def make_embedder(self):
        from .store import HttpEmbedder, LocalHashEmbedder

        if self.embedder == "http":
            return HttpEmbedder(base_url=self.api_base, model=self.embedder_model)
        return LocalHashEmbedder()

    def extraction_config(self):
        from .extraction import ExtractionConfig

        return ExtractionConfig(
            rounds=self.rounds,
            threshold=self.threshold,
            reply_scale=self.reply_scale,
        )


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {value!r}")


def _parse_scale(value: str, key: str) -> tuple[float, float]:
    try:
        lo, hi = value.split(":")
        return float(lo), float(hi)
    except ValueError as exc:
        raise ConfigError(key, f"expected 'lo:hi', got {value!r}") from exc


def _parse_date(value: str, key: str) -> date:
    try:
        return date.fromisoformat(value.strip())
    except ValueError as exc:
        raise ConfigError(key, f"expected ISO date, got {value!r}") from exc


def _apply(cfg: RunConfig, key: str, value: str) -> None:
    value = value.strip()
    try:
        if key == "backend":
            cfg.backend = value
        elif key == "backend.script":
            cfg.mock_script = value
        elif key == "backend.model":
            cfg.model = value
        elif key == "backend.base":
            cfg.api_base = value
        elif key == "backend.in_flight":
            cfg.in_flight_cap = int(value)
        elif key == "embedder":
            cfg.embedder = value
        elif key == "embedder.model":
            cfg.embedder_model = value
        elif key == "extraction.rounds":
            cfg.rounds = int(value)
        elif key == "extraction.threshold":
            cfg.threshold = float(value)
        elif key == "extraction.reply_scale":
            cfg.reply_scale = _parse_scale(value, key)
        elif key == "retrieval.k":
            cfg.k = int(value)
        elif key == "mode":
            cfg.mode = value
        elif key == "filter.enabled":
            cfg.filter_enabled = _parse_bool(value, key)
        elif key == "integrator.enabled":
            cfg.integrator_enabled = _parse_bool(value, key)
        elif key == "token_budget":
            cfg.token_budget = int(value)
        elif key == "eval.runs":
            cfg.runs = int(value)
        elif key == "metrics.tau":
            cfg.tau = float(value)
        elif key == "metrics.precision_mode":
            cfg.precision_mode = value
        elif key == "cutoff":
            cfg.cutoff = _parse_date(value, key)
        elif key == "seed":
            cfg.seed = int(value)
        elif key == "workers":
            cfg.workers = int(value)
        else:
            raise ConfigError(key, "unknown config key")
    except ValueError as exc:
        raise ConfigError(key, f"bad value {value!r}: {exc}") from exc


def _validate(cfg: RunConfig, explicit: set[str]) -> None:
    if cfg.backend not in ("http", "mock"):
        raise ConfigError("backend", f"expected http or mock, got {cfg.backend!r}")
    if cfg.embedder not in ("local", "http"):
        raise ConfigError("embedder", f"expected local or http, got {cfg.embedder!r}")
    if cfg.mode not in MODES:
        raise ConfigError("mode", f"expected one of {MODES}, got {cfg.mode!r}")
    if cfg.precision_mode not in ("prose", "literal"):
        raise ConfigError("metrics.precision_mode", f"got {cfg.precision_mode!r}")
    if cfg.k < 1:
        raise ConfigError("retrieval.k", "must be >= 1")
    if cfg.runs < 1:
        raise ConfigError("eval.runs", "must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("workers", "must be >= 1")

    # Mode implies stage toggles; explicit contradictions are config errors,
    # and knobs for disabled stages are ignored with a warning.
    if cfg.filter_enabled is not None and cfg.filter_enabled != cfg.filter_on:
        raise ConfigError(
            "filter.enabled",
            f"contradicts mode={cfg.mode} (which implies filter={cfg.filter_on})",
        )
    if cfg.integrator_enabled is not None and cfg.integrator_enabled != cfg.integrator_on:
        raise ConfigError(
            "integrator.enabled",
            f"contradicts mode={cfg.mode} (which implies integrator={cfg.integrator_on})",
        )
    if cfg.mode == "no_rag" and "retrieval.k" in explicit:
        message = "retrieval.k ignored because mode=no_rag disables retrieval"
        cfg.warnings.append(message)
        logger.warning(message)


def load_config(
    path: str | Path | None = None, overrides: dict[str, str] | None = None
) -> RunConfig:
    """Parse a config file and apply CLI overrides (overrides win)."""
    cfg = RunConfig()
    explicit: set[str] = set()
    if path is not None:
        file_path = Path(path)
        if not file_path.is_file():
            raise ConfigError(str(path), "config file not found")
        for line_no, line in enumerate(
            file_path.read_text(encoding="utf-8").splitlines(), 1
        ):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}", f"expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            _apply(cfg, key, value)
            explicit.add(key)
    for key, value in (overrides or {}).items():
        _apply(cfg, key, value)
        explicit.add(key)
    _validate(cfg, explicit)
    return cfg
