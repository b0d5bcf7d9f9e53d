from functools import lru_cache
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Literal, Optional

class Settings(BaseSettings):
    """
    Application settings loaded from environment variables or .env file.
    """
    model_config = SettingsConfigDict(env_file='.env', extra='ignore')

    # Logging / output
    LOG_LEVEL: str = "INFO"
    LOG_DIR: Optional[str] = None # defaults to <repo>/logs
    OUTPUT_DIR: str = "runs"

    # Search defaults
    DEFAULT_STEPS: int = 4
    DEFAULT_ALIVE_NODES: int = 3
    DEFAULT_DELTA_POLICY: str = "sqrt" # sqrt | log | fixed:<k>
    EARLY_STOPPING: bool = True

    # Training defaults (desk scale)
    TRAIN_LEARNING_RATE: float = 0.1
    TRAIN_BATCH_SIZE: int = 32
    TRAIN_BATCHES_PER_STEP: int = 32
    FINAL_FINETUNE_BATCHES: int = 320
    WORKERS: int = 1

    # Benchmark protocols: exploration-grade and final-grade
    EXPLORATION_WARMUP_ITERS: int = 100
    EXPLORATION_MEASURE_ITERS: int = 300
    EXPLORATION_AGGREGATE: Literal["median", "mean"] = "median"
    FINAL_WARMUP_ITERS: int = 1000
    FINAL_MEASURE_ITERS: int = 10000
    FINAL_AGGREGATE: Literal["median", "mean"] = "mean"

    # Analytical latency model
    ANALYTICAL_ALIGN: int = 8
    ANALYTICAL_SLANT: float = 0.2
    ANALYTICAL_KAPPA_DENSE: float = 1e-4 # ms per unit of work
    ANALYTICAL_KAPPA_CONV: float = 1e-5
    ANALYTICAL_LAYER_OVERHEAD_MS: float = 0.005
    ANALYTICAL_BASE_MS: float = 0.01

    # External command provider
    EXTERNAL_TIMEOUT_S: float = 300.0

    # Robustness testing only; keep at 0 for real runs
    LATENCY_NOISE_SIGMA: float = 0.0

@lru_cache()
def get_settings() -> Settings:
    """
    Returns a cached instance of the Settings class.
    """
    return Settings()
