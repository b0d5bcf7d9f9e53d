from enum import Enum
from typing import Dict

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class Reduction(str, Enum):
    SUM = "sum"
    MEAN = "mean"
    LINF = "linf"


class ReductionConfig(BaseModel):
    """
    Spatial, neural and channel-group reductions. The default (sum, linf, sum)
    is the best-performing combination of the reduction ablation.
    """
    spatial: Reduction = Reduction.SUM
    neural: Reduction = Reduction.LINF
    group: Reduction = Reduction.SUM

    @classmethod
    def parse(cls, text: str) -> "ReductionConfig":
        """'sum,linf,sum' -> ReductionConfig."""
        parts = [p.strip().lower() for p in text.split(',')]
        if len(parts) != 3:
            raise ValueError(f"expected three reductions (spatial,neural,group), got '{text}'")
        return cls(spatial=Reduction(parts[0]), neural=Reduction(parts[1]), group=Reduction(parts[2]))


class ImportanceState(BaseModel):
    """
    Accumulated |W * dL/dW| per prunable layer id, shaped like that layer's weight.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    accumulators: Dict[str, np.ndarray] = Field(default_factory=dict)
    batches: int = 0
