"""Configuration management for ECTR.

Two layers: process settings from environment variables (``EctrConfig``) and
per-run settings from a flat ``section.key = value`` file (``load_run_config``).
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

from pydantic import ValidationError

from . import __version__
from .errors import ConfigError
from .models import RunConfig

LOG_MODES = {"quiet": logging.WARNING, "info": logging.INFO, "trace": logging.DEBUG}


class EctrConfig:
    """Process-level configuration for ECTR."""

    def __init__(self):
        """Initialize configuration from environment variables."""
        self._unparsed: List[str] = []
        self.log_mode: str = os.getenv("ECTR_LOG", "info").lower()
        self.jobs: int = self._number("ECTR_JOBS", "1", int)
        self.sweep_cap: int = self._number("ECTR_SWEEP_CAP", "256", int)
        self.tolerance: float = self._number("ECTR_TOLERANCE", "1e-4", float)

    def _number(self, name: str, default: str, kind: Callable[[str], Any]) -> Any:
        # unparsable values fall back to the default and fail in validate()
        raw = os.getenv(name, default)
        try:
            return kind(raw)
        except ValueError:
            self._unparsed.append(f"{name} must be a number, got {raw!r}")
            return kind(default)

    @property
    def log_level(self) -> str:
        """Logging level name derived from ECTR_LOG; unknown modes fall back to INFO."""
        return logging.getLevelName(LOG_MODES.get(self.log_mode, logging.INFO))

    def validate(self) -> None:
        """Validate configuration."""
        if self._unparsed:
            raise ValueError(self._unparsed[0])

        if self.log_mode not in LOG_MODES:
            raise ValueError(f"ECTR_LOG must be one of {sorted(LOG_MODES)}")

        if self.jobs <= 0:
            raise ValueError("ECTR_JOBS must be positive")

        if self.sweep_cap <= 0:
            raise ValueError("ECTR_SWEEP_CAP must be positive")

        if self.tolerance <= 0:
            raise ValueError("ECTR_TOLERANCE must be positive")

    def get_artifact_version(self) -> str:
        """Version string embedded in every manifest."""
        return f"ectr/{__version__}"


# Global config instance
config = EctrConfig()


def parse_flat_config(text: str, source: str = "<config>") -> Dict[str, Dict[str, str]]:
    """Split ``section.key = value`` lines into a nested dict of raw strings."""
    sections: Dict[str, Dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        dotted, value = (part.strip() for part in line.split("=", 1))
        if "." not in dotted:
            raise ConfigError(f"{source}:{lineno}: key '{dotted}' has no section")
        section, key = dotted.split(".", 1)
        entries = sections.setdefault(section, {})
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{dotted}'")
        entries[key] = value
    return sections


def build_run_config(sections: Dict[str, Any]) -> RunConfig:
    """Validate raw sections into a RunConfig, converting pydantic errors."""
    unknown = set(sections) - set(RunConfig.model_fields)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    try:
        return RunConfig.model_validate(sections)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from e


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Load a run configuration from a flat config file or a JSON manifest."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    if path.suffix == ".json":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON manifest: {e}") from e
        if not isinstance(payload, dict) or "config" not in payload:
            raise ConfigError(f"{path}: manifest has no 'config' object")
        return build_run_config(payload["config"])

    return build_run_config(parse_flat_config(text, source=str(path)))


def apply_overrides(run: RunConfig, seed: Optional[int] = None) -> RunConfig:
    """Return a copy of ``run`` with command-line overrides applied."""
    if seed is None:
        return run
    return run.model_copy(
        update={
            "simulation": run.simulation.model_copy(update={"seed": seed}),
            "train": run.train.model_copy(update={"seed": seed}),
        }
    )
