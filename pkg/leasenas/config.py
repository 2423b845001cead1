# config.py
# LeaSE Engine - Configuration Settings
# Created by Digital COE Gen AI Team

import configparser
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Union

from loguru import logger
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from leasenas.exceptions import ConfigError
from leasenas.models.schemas import RunConfig


class Settings(BaseSettings):
    """Process settings loaded from environment variables (prefix LEASE_)."""

    model_config = SettingsConfigDict(env_prefix="LEASE_", env_file=".env", extra="ignore")

    # Application
    APP_NAME: str = "LeaSE Engine"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_DIR: Optional[Path] = None
    LOG_ROTATION: str = "50 MB"
    LOG_RETENTION: str = "10 days"

    # Runs
    OUTPUT_ROOT: Path = Path("runs")
    WORKERS: int = 1


# Create settings instance
settings = Settings()


# INI section name -> RunConfig field
CONFIG_SECTIONS = tuple(RunConfig.model_fields)


def configure_logging(level: Optional[str] = None):
    """Install loguru sinks: stderr at the requested level, plus a rotating file when LOG_DIR is set."""
    level = (level or settings.LOG_LEVEL).upper()
    logger.remove()
    logger.add(sys.stderr, level=level, format="{time:HH:mm:ss} | {level: <8} | {name}:{line} - {message}")
    if settings.LOG_DIR:
        logger.add(
            Path(settings.LOG_DIR) / "leasenas_{time}.log",
            rotation=settings.LOG_ROTATION,
            retention=settings.LOG_RETENTION,
            level=level,
        )


def _validation_error(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    field = ".".join(str(part) for part in first["loc"])
    return ConfigError(first["msg"], field=field or None)


def build_run_config(sections: Dict[str, Dict[str, Any]]) -> RunConfig:
    """Validate raw section -> key -> value data into a RunConfig."""
    for name in sections:
        if name not in CONFIG_SECTIONS:
            raise ConfigError(f"unknown section [{name}]; expected one of {list(CONFIG_SECTIONS)}", field=name)
    try:
        return RunConfig.model_validate(sections)
    except ValidationError as exc:
        raise _validation_error(exc) from None


def parse_config(path: Union[str, Path]) -> RunConfig:
    """
    Read an INI-style run configuration.

    Args:
        path: File with `key = value` lines under [search], [cell], [network], [data], [run]

    Returns:
        Fully validated RunConfig; absent keys take their documented defaults
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None

    parser = configparser.ConfigParser(
        interpolation=None,
        strict=True,
        empty_lines_in_values=False,
        inline_comment_prefixes=("#", ";"),
    )
    try:
        parser.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", line=exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"cannot parse {line.strip()!r}", line=lineno) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(exc.message.split(": ", 1)[-1], line=exc.lineno) from None

    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    config = build_run_config(sections)
    logger.debug(f"Loaded run config from {path}: {config.model_dump(mode='json')}")
    return config


def with_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """
    Re-validate a config with dotted-key overrides, e.g. {"run.seed": 3}.

    None values are ignored so CLI flags that were not given leave the file value in place.
    """
    data = config.model_dump()
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in data or key not in data[section]:
            raise ConfigError(f"unknown override {dotted!r}", field=dotted)
        data[section][key] = value
    return build_run_config(data)
