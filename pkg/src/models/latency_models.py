from typing import List, Literal, Tuple

from pydantic import BaseModel, Field, NonNegativeFloat, NonNegativeInt, PositiveInt

from src.config import get_settings


class BenchmarkProtocol(BaseModel):
    """Warm-up and measurement iterations handed to real benchmarks."""
    warmup_iters: NonNegativeInt = 100
    measure_iters: PositiveInt = 300
    aggregate: Literal["median", "mean"] = "median"

    @classmethod
    def exploration(cls) -> "BenchmarkProtocol":
        settings = get_settings()
        return cls(
            warmup_iters=settings.EXPLORATION_WARMUP_ITERS,
            measure_iters=settings.EXPLORATION_MEASURE_ITERS,
            aggregate=settings.EXPLORATION_AGGREGATE,
        )

    @classmethod
    def final(cls) -> "BenchmarkProtocol":
        settings = get_settings()
        return cls(
            warmup_iters=settings.FINAL_WARMUP_ITERS,
            measure_iters=settings.FINAL_MEASURE_ITERS,
            aggregate=settings.FINAL_AGGREGATE,
        )


class AnalyticalModelParams(BaseModel):
    """
    Cost model with memory-alignment steps: latency jumps at multiples of `align`,
    `slant` keeps a linear share so the steps are not flat.
    """
    align: PositiveInt = Field(default_factory=lambda: get_settings().ANALYTICAL_ALIGN)
    slant: float = Field(default_factory=lambda: get_settings().ANALYTICAL_SLANT, ge=0.0, le=1.0)
    kappa_dense: NonNegativeFloat = Field(default_factory=lambda: get_settings().ANALYTICAL_KAPPA_DENSE)
    kappa_conv: NonNegativeFloat = Field(default_factory=lambda: get_settings().ANALYTICAL_KAPPA_CONV)
    layer_overhead_ms: NonNegativeFloat = Field(default_factory=lambda: get_settings().ANALYTICAL_LAYER_OVERHEAD_MS)
    base_ms: NonNegativeFloat = Field(default_factory=lambda: get_settings().ANALYTICAL_BASE_MS)


class CacheEvent(BaseModel):
    index: int
    event: Literal["hit", "miss"]
    signature: Tuple[int, ...]


class CacheStats(BaseModel):
    hits: int = 0
    misses: int = 0
    hit_rate: float = 0.0
    entries: int = 0
    events: List[CacheEvent] = Field(default_factory=list)
