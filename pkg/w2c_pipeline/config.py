"""Configuration management for the pipeline."""

import json
from pathlib import Path
from typing import Any

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from .models import PipelineConfig


class Settings(BaseSettings):
    """Environment-level settings: where the model services live and how to talk to them."""

    model_config = SettingsConfigDict(
        env_prefix="W2C_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Model services
    vlm_url: str = Field(
        default="http://localhost:8000/v1/vlm", description="VLM completion endpoint"
    )
    grounding_url: str = Field(
        default="http://localhost:8001/v1/ground",
        description="Phrase grounding endpoint",
    )
    backend_token: str | None = Field(
        default=None, description="Bearer token passed through to both services"
    )

    # Transport behaviour
    request_timeout: float = Field(
        default=120.0, description="Per-request timeout in seconds"
    )
    max_retries: int = Field(
        default=3, ge=1, description="Attempts per request before giving up"
    )
    retry_backoff: float = Field(
        default=1.0, ge=0.0, description="Initial backoff in seconds, doubled per retry"
    )

    # Application
    log_level: str = Field(default="INFO", description="Logging level")
    prompt_file: Path | None = Field(
        default=None, description="JSON file overriding prompt templates"
    )


def load_pipeline_config(
    path: Path | None = None, overrides: dict[str, Any] | None = None
) -> PipelineConfig:
    """
    Build a PipelineConfig from an optional JSON file plus overrides.

    Args:
        path: JSON file with any subset of PipelineConfig fields
        overrides: Values that win over the file (CLI flags); None entries are ignored

    Returns:
        PipelineConfig: Validated, frozen configuration
    """
    data: dict[str, Any] = {}
    if path is not None:
        data.update(json.loads(Path(path).read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return PipelineConfig.model_validate(data)


# Global settings instance
settings = Settings()
