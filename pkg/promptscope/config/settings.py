from __future__ import annotations

from pathlib import Path

from pydantic import Field, ValidationInfo, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Process-level configuration for promptscope. Values can be set via environment
    variables or a local .env file. Experiment parameters live in RunConfig
    (config/schema.py); this class only carries paths and logging knobs.
    """

    APP_ENV: str = Field(default="development", description='"development", "production" or "test".')
    LOG_LEVEL: str | None = Field(default=None, description="Overrides the level implied by APP_ENV.")

    # Paths
    LOG_DIR: str = Field(default="./logs", description="Root log directory.")
    LOG_FILE: str = Field(default="", validate_default=True, description="Log file path; defaults to LOG_DIR/promptscope.log.")

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    @field_validator("APP_ENV")
    @classmethod
    def _validate_env(cls, v: str) -> str:
        v = v.lower().strip()
        if v not in {"development", "production", "test"}:
            raise ValueError('APP_ENV must be "development", "production" or "test"')
        return v

    @field_validator("LOG_LEVEL")
    @classmethod
    def _validate_level(cls, v: str | None) -> str | None:
        if v is None or not v.strip():
            return None
        v = v.upper().strip()
        if v not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown LOG_LEVEL {v!r}")
        return v

    @field_validator("LOG_FILE")
    @classmethod
    def _default_log_file(cls, v: str, info: ValidationInfo) -> str:
        if v:
            return v
        log_dir = info.data.get("LOG_DIR") or "./logs"
        return str(Path(log_dir) / "promptscope.log")


settings = Settings()
