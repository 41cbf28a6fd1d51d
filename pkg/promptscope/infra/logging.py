"""
Logging configuration for promptscope.
Prefers YAML-based dictConfig; falls back to programmatic RotatingFileHandler.
Respects APP_ENV and LOG_LEVEL, and writes to LOG_FILE (default under LOG_DIR).
"""
from __future__ import annotations

import logging
import logging.config
from logging.handlers import RotatingFileHandler
from pathlib import Path

import yaml

from promptscope.config.settings import settings

LOGGER_NAME = "promptscope"
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
MAX_LOG_SIZE = 10 * 1024 * 1024  # 10MB
BACKUP_COUNT = 5
CONFIG_PATH = Path(__file__).resolve().parents[1] / "config" / "logging.yaml"


def _env_log_level() -> int:
    if settings.LOG_LEVEL:
        return getattr(logging, settings.LOG_LEVEL)
    if settings.APP_ENV == "development":
        return logging.DEBUG
    if settings.APP_ENV == "test":
        return logging.WARNING
    return logging.INFO


def _try_load_yaml_config(log_file: str, level: int) -> bool:
    """Apply logging.yaml with the file path and level injected. Returns True if applied."""
    if not CONFIG_PATH.exists():
        return False
    with CONFIG_PATH.open("r", encoding="utf-8") as f:
        cfg = yaml.safe_load(f)
    lvl_name = logging.getLevelName(level)
    for hcfg in (cfg.get("handlers") or {}).values():
        if hcfg.get("class", "").endswith("RotatingFileHandler"):
            hcfg["filename"] = log_file
        if "level" in hcfg:
            hcfg["level"] = lvl_name
    for lc in (cfg.get("loggers") or {}).values():
        lc["level"] = lvl_name
    Path(log_file).parent.mkdir(parents=True, exist_ok=True)
    logging.config.dictConfig(cfg)
    return True


def setup_logging(log_file: str | None = None) -> logging.Logger:
    """Set up the promptscope logger via YAML if possible; otherwise programmatically."""
    log_file = log_file or settings.LOG_FILE
    level = _env_log_level()
    try:
        if _try_load_yaml_config(log_file, level):
            return logging.getLogger(LOGGER_NAME)
    except (OSError, ValueError, yaml.YAMLError) as e:
        logging.getLogger(LOGGER_NAME).warning("logging.yaml rejected (%s); using fallback", e)

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(level)
    logger.propagate = False
    formatter = logging.Formatter(LOG_FORMAT)

    console = logging.StreamHandler()
    console.setFormatter(formatter)
    logger.addHandler(console)

    try:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(log_file, maxBytes=MAX_LOG_SIZE, backupCount=BACKUP_COUNT, encoding="utf-8")
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    except OSError as e:
        logger.error("file logging unavailable (%s); console only", e)

    return logger


def get_logger(name: str | None = None) -> logging.Logger:
    """Child of the promptscope logger. Configuration is left to the entrypoint."""
    if not name or name == LOGGER_NAME:
        return logging.getLogger(LOGGER_NAME)
    if name.startswith(LOGGER_NAME + "."):
        return logging.getLogger(name)
    return logging.getLogger(f"{LOGGER_NAME}.{name}")
