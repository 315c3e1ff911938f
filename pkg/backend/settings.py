"""Environment settings for the command line and the run registry."""
from __future__ import annotations

import logging
from functools import lru_cache
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="MINPRICE_", extra="ignore", env_ignore_empty=True)

    output_dir: Optional[Path] = Field(default=None, description="Overrides [output] directory of the run config")
    log_level: str = Field(default="INFO")
    n_jobs: int = Field(default=1, description="joblib workers for path chunks and sweep points")
    database_url: Optional[str] = Field(default=None, description="Run registry URL; SQLite file in the output dir if unset")
    registry_enabled: bool = Field(default=False)

    def registry_url(self, output_dir: Path) -> str:
        if self.database_url:
            return self.database_url
        return f"sqlite:///{(Path(output_dir) / 'runs.sqlite').resolve()}"


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()


def configure_logging(level: Optional[str] = None, verbose: bool = False) -> None:
    name = "DEBUG" if verbose else (level or get_settings().log_level).upper()
    logging.getLogger().setLevel(getattr(logging, name, logging.INFO))
    logger.debug(f"🔧 log level set to {name}")
