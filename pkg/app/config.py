"""Application configuration."""

import os


class Settings:
    """Process-level settings read from the environment."""

    # Logging
    LOG_LEVEL: str = os.getenv("OCE_LOG_LEVEL", "INFO").upper()

    # Block-parallel stages (flow matching, denoise grouping)
    WORKERS: int = int(os.getenv("OCE_WORKERS", "1"))

    # Display convention for magnitude images
    FLOOR_DB: float = float(os.getenv("OCE_FLOOR_DB", "-60"))

    # Default location for CLI outputs
    DATA_DIR: str = os.getenv("OCE_DATA_DIR", "./data")

    # Feature Flags
    ENABLE_METRICS: bool = os.getenv("ENABLE_METRICS", "false").lower() == "true"


settings = Settings()
