import os
from dataclasses import dataclass


@dataclass(frozen=True)
class Settings:
    output_dir: str
    db_path: str
    default_config: str | None
    cors_origins: list[str]
    log_level: str
    max_finished_jobs: int


def load_settings() -> Settings:
    origins_raw = os.getenv("CORS_ORIGINS", "*")
    origins = [o.strip() for o in origins_raw.split(",") if o.strip()]
    return Settings(
        output_dir=os.getenv("GBEV_OUTPUT_DIR", "tmp_runtime/runs"),
        db_path=os.getenv("GBEV_DB_PATH", "tmp_runtime/runs.db"),
        default_config=os.getenv("GBEV_CONFIG") or None,
        cors_origins=origins if origins else ["*"],
        log_level=os.getenv("LOG_LEVEL", "INFO"),
        max_finished_jobs=max(0, int(os.getenv("GBEV_MAX_FINISHED_JOBS", "100"))),
    )
