from enum import Enum
from typing import Any, Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class LayerKind(str, Enum):
    INPUT = "Input"
    DENSE = "Dense"
    CONV2D = "Conv2d"
    ADD = "Add"
    RELU = "ReLU"
    MAXPOOL2D = "MaxPool2d"
    AVGPOOL2D = "AvgPool2d"
    GLOBAL_AVG_POOL = "GlobalAvgPool"
    FLATTEN = "Flatten"
    OUTPUT = "Output"


PRUNABLE_KINDS = (LayerKind.DENSE.value, LayerKind.CONV2D.value)
KNOWN_KINDS = tuple(kind.value for kind in LayerKind)


class Port(str, Enum):
    INPUT = "input"
    OUTPUT = "output"


class TensorSpec(BaseModel):
    """
    A named weight tensor. `data` is stored as float32, already reshaped to `shape` (row-major).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str = Field(..., description="Tensor-store key, '<layer id>.<role>'.")
    shape: List[int] = Field(..., description="Positive integer extents.")
    data: np.ndarray = Field(..., description="float32 values, row-major, shaped like `shape`.")

    @field_validator('data')
    @classmethod
    def _as_float32(cls, value: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(value, dtype=np.float32)

    @model_validator(mode='after')
    def _check_shape(self) -> "TensorSpec":
        if not self.shape or any(extent <= 0 for extent in self.shape):
            raise ValueError(f"tensor '{self.name}' has an invalid shape {self.shape}")
        if int(np.prod(self.shape)) != self.data.size:
            raise ValueError(f"tensor '{self.name}': shape {self.shape} does not match {self.data.size} values")
        self.data = self.data.reshape(self.shape)
        return self

    def clone(self) -> "TensorSpec":
        return TensorSpec(name=self.name, shape=list(self.shape), data=self.data.copy())


class Layer(BaseModel):
    """
    One node of the network graph. `params` holds the kind-specific fields
    (Dense: in_features/out_features; Conv2d: in_channels/out_channels/kernel/stride/padding;
    pools: window/stride; Input: shape).
    """
    id: str = Field(..., description="Unique layer identifier.")
    kind: str = Field(..., description="Layer kind, one of LayerKind values.")
    inputs: List[str] = Field(default_factory=list, description="Ordered ids of the producing layers.")
    params: Dict[str, Any] = Field(default_factory=dict, description="Kind-specific parameters.")
    weight_names: List[str] = Field(default_factory=list, description="Owned tensor roles ('weight', 'bias').")

    def tensor_key(self, role: str) -> str:
        return f"{self.id}.{role}"

    @property
    def is_prunable(self) -> bool:
        return self.kind in PRUNABLE_KINDS


class ModelGraph(BaseModel):
    """
    The network being pruned: layers, their tensors, and free-form metadata.
    Treated as immutable; pruning and training work on clones.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    layers: List[Layer] = Field(default_factory=list)
    tensors: Dict[str, TensorSpec] = Field(default_factory=dict)
    metadata: Dict[str, str] = Field(default_factory=dict)

    def layer(self, layer_id: str) -> Layer:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(f"unknown layer '{layer_id}'")

    def layer_map(self) -> Dict[str, Layer]:
        return {layer.id: layer for layer in self.layers}

    def weight(self, layer: Layer, role: str = "weight") -> np.ndarray:
        return self.tensors[layer.tensor_key(role)].data

    def has_tensor(self, layer: Layer, role: str) -> bool:
        return role in layer.weight_names and layer.tensor_key(role) in self.tensors

    def clone(self) -> "ModelGraph":
        return ModelGraph(
            layers=[layer.model_copy(deep=True) for layer in self.layers],
            tensors={name: tensor.clone() for name, tensor in self.tensors.items()},
            metadata=dict(self.metadata),
        )


class PortRef(BaseModel):
    model_config = ConfigDict(frozen=True)

    layer_id: str
    port: Port

    def __str__(self) -> str:
        return f"{self.layer_id}:{self.port.value}"


class ChannelGroup(BaseModel):
    """
    Channels that must be pruned together: every member port keeps the same channel count.
    """
    index: int = Field(..., description="Group index n in [0, N).")
    members: List[PortRef] = Field(default_factory=list, description="Dense/Conv2d ports in this group.")
    size: int = Field(..., description="Channel count C_n shared by all member ports.")
    prunable: bool = Field(True, description="False for the groups holding the network input or the logits.")


class Signature(BaseModel):
    """
    Per-group channel counts C = (C_1, ..., C_N). Hashable by value; used as cache key.
    """
    model_config = ConfigDict(frozen=True)

    counts: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.counts)

    def __getitem__(self, index: int) -> int:
        return self.counts[index]

    def with_count(self, index: int, value: int) -> "Signature":
        counts = list(self.counts)
        counts[index] = value
        return Signature(counts=tuple(counts))

    def __str__(self) -> str:
        return "(" + ",".join(str(c) for c in self.counts) + ")"
