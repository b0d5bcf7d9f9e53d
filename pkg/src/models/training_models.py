from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

from src.config import get_settings


class TrainConfig(BaseModel):
    """
    SGD settings for step-wise and final fine-tuning.
    """
    learning_rate: PositiveFloat = Field(default_factory=lambda: get_settings().TRAIN_LEARNING_RATE)
    batch_size: PositiveInt = Field(default_factory=lambda: get_settings().TRAIN_BATCH_SIZE)
    batches_per_step: PositiveInt = Field(default_factory=lambda: get_settings().TRAIN_BATCHES_PER_STEP)
    seed: int = 0


class DatasetSpec(BaseModel):
    """
    Where examples come from. Synthetic blobs are Gaussian clusters, one per class;
    CSV files carry one numeric feature per column plus a label column.
    """
    source: Literal["synthetic-blobs", "csv-file"] = "synthetic-blobs"
    seed: int = 0
    n_classes: PositiveInt = 4
    n_features: PositiveInt = 16
    n_samples: PositiveInt = 800
    cluster_std: PositiveFloat = 1.0
    path: Optional[str] = None
    label_column: str = "label"
    validation_fraction: float = Field(0.25, gt=0.0, lt=1.0)
    input_shape: Optional[List[int]] = Field(None, description="Reshape features to (C, H, W) for conv models.")

    @model_validator(mode='after')
    def _check_source(self) -> "DatasetSpec":
        if self.source == "csv-file" and not self.path:
            raise ValueError("csv-file datasets need a path")
        return self


class Batch(BaseModel):
    """Inputs (batch x features or batch x C x H x W) with one integer label per example."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    inputs: np.ndarray
    labels: np.ndarray

    @model_validator(mode='after')
    def _check_batch(self) -> "Batch":
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"batch has {self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        return self

    def __len__(self) -> int:
        return int(self.labels.shape[0])


class Dataset(BaseModel):
    """Disjoint train/validation splits in a deterministic order."""
    spec: DatasetSpec
    train: Batch
    validation: Batch
    n_classes: int


class GradientStore(BaseModel):
    """Per-tensor gradients (float64), keyed and shaped like the model's tensor store."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    grads: Dict[str, np.ndarray] = Field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def items(self):
        return self.grads.items()
