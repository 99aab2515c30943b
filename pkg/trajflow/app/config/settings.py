from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables (prefix TRAJFLOW_)."""

    # Filesystem defaults used when a command is given no explicit path
    data_dir: str = "data"
    runs_dir: str = "runs"

    # Torch runtime
    # A single intra-op thread keeps CPU reductions in a fixed order, which the
    # end-to-end determinism checks rely on.
    torch_num_threads: int = 1

    # Evaluation
    eval_workers: int = 1  # threads used by trajectory recovery (parallel over frames)
    recover_residual_threshold: float = 0.02  # photometric MSE above which a frame is unreliable

    # Scene cache
    scene_cache_size: int = 64  # maximum number of decoded scenes kept in memory

    # Logging Configuration
    log_level: str = "INFO"  # DEBUG, INFO, WARNING, ERROR, CRITICAL
    log_json_format: bool = False  # Use JSON structured logging
    log_file: str | None = None  # Optional log file path

    model_config = SettingsConfigDict(
        env_prefix="TRAJFLOW_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )


# Global settings instance
settings = Settings()
