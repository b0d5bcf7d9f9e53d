from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

from src.config import get_settings
from src.models.graph_models import ModelGraph, Signature
from src.models.importance_models import ReductionConfig
from src.models.latency_models import CacheStats
from src.models.training_models import DatasetSpec, TrainConfig


class StepPolicy(BaseModel):
    """How many channels one latency probe removes: adaptive sqrt, adaptive log, or fixed."""
    kind: Literal["sqrt", "log", "fixed"] = "sqrt"
    size: PositiveInt = 1

    @classmethod
    def parse(cls, text: str) -> "StepPolicy":
        text = text.strip().lower()
        if text in ("sqrt", "log"):
            return cls(kind=text)
        if text.startswith("fixed:"):
            return cls(kind="fixed", size=int(text.split(":", 1)[1]))
        raise ValueError(f"unknown step policy '{text}' (expected sqrt, log or fixed:<k>)")

    def __str__(self) -> str:
        return f"fixed:{self.size}" if self.kind == "fixed" else self.kind


class LatencyGoal(BaseModel):
    """Either an absolute budget in ms or a fraction of the root latency."""
    ms: Optional[PositiveFloat] = None
    fraction: Optional[PositiveFloat] = None

    @model_validator(mode='after')
    def _exactly_one(self) -> "LatencyGoal":
        if (self.ms is None) == (self.fraction is None):
            raise ValueError("a latency goal is either absolute (ms) or relative (fraction), not both")
        return self

    @classmethod
    def parse(cls, text: str) -> "LatencyGoal":
        """'2.5ms' is absolute, a bare number is relative to the root latency."""
        text = str(text).strip().lower()
        if text.endswith("ms"):
            return cls(ms=float(text[:-2]))
        return cls(fraction=float(text))

    def resolve(self, root_ms: float) -> float:
        return self.ms if self.ms is not None else self.fraction * root_ms

    def __str__(self) -> str:
        return f"{self.ms}ms" if self.ms is not None else str(self.fraction)


class SearchConfig(BaseModel):
    """
    Inputs of the Archtree search.
    """
    steps: PositiveInt = Field(default_factory=lambda: get_settings().DEFAULT_STEPS)
    alive: PositiveInt = Field(default_factory=lambda: get_settings().DEFAULT_ALIVE_NODES, description="Beam width A.")
    goal: LatencyGoal = Field(default_factory=lambda: LatencyGoal(fraction=0.5))
    step_policy: StepPolicy = Field(default_factory=lambda: StepPolicy.parse(get_settings().DEFAULT_DELTA_POLICY))
    early_stopping: bool = Field(default_factory=lambda: get_settings().EARLY_STOPPING)
    reductions: ReductionConfig = Field(default_factory=ReductionConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    final_train: TrainConfig = Field(default_factory=lambda: TrainConfig(batches_per_step=get_settings().FINAL_FINETUNE_BATCHES))
    finetune: bool = Field(True, description="False keeps weights frozen: gradients only, no updates, no final fine-tuning.")
    filter_by: Literal["step", "cumulative"] = "step"
    seed: int = 0
    min_channels_per_group: PositiveInt = 1
    workers: PositiveInt = Field(default_factory=lambda: get_settings().WORKERS)


class Node(BaseModel):
    """
    A pruned sub-model in the tree. `kept[n]` lists the root-model channel indices
    still present in group n.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: int
    signature: Signature
    model: ModelGraph
    parent: Optional[int] = None
    step: int = 0
    step_loss: float = 0.0
    cumulative_loss: float = 0.0
    latency_ms: Optional[float] = None
    alive: bool = True
    kept: List[np.ndarray] = Field(default_factory=list)


class Tree(BaseModel):
    """
    All admitted nodes, the alive set, and a signature registry for uniqueness.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    nodes: Dict[int, Node] = Field(default_factory=dict)
    alive: List[int] = Field(default_factory=list)
    registry: Dict[Signature, int] = Field(default_factory=dict)

    def add(self, node: Node) -> Node:
        if node.signature in self.registry:
            raise ValueError(f"signature {node.signature} already exists in the tree")
        self.nodes[node.id] = node
        self.registry[node.signature] = node.id
        return node

    def next_id(self) -> int:
        return len(self.nodes)

    def alive_nodes(self) -> List[Node]:
        return [self.nodes[node_id] for node_id in self.alive]

    @property
    def root(self) -> Node:
        return self.nodes[0]


class Candidate(BaseModel):
    """A child produced by blossom, not yet admitted to the tree."""
    parent_id: int
    group: int
    pruned: Tuple[int, ...] = Field(..., description="Channel indices removed, relative to the parent model.")
    signature: Signature
    step_loss: float
    score: float = Field(..., description="Value compared by the importance filter.")
    latency_ms: float
    order: int = 0


class BlossomOutcome(BaseModel):
    status: Literal["child", "no-child", "early-stopped"]
    candidate: Optional[Candidate] = None
    probes: int = 0
    loss: float = 0.0


class StepRecord(BaseModel):
    step: int
    tau_ms: float
    alive: List[List[int]] = Field(default_factory=list)
    losses: List[float] = Field(default_factory=list)
    candidates: int = 0
    probes: int = 0
    provider_calls: int = 0
    early_stops: int = 0
    no_child: int = 0
    duplicates: int = 0
    importance_batches: int = 0
    cache: Optional[CacheStats] = None


class ResultBundle(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    rank: int
    node_id: int
    signature: List[int]
    latency_ms: float
    accuracy: Optional[float] = None
    parameters: int
    step_loss: float
    cumulative_loss: float
    model: Optional[ModelGraph] = Field(None, exclude=True)


class RunReport(BaseModel):
    created_at: datetime = Field(default_factory=datetime.now)
    config: Dict[str, Any] = Field(default_factory=dict)
    dataset: Optional[Dict[str, Any]] = None
    provider: Dict[str, Any] = Field(default_factory=dict)
    root_signature: List[int] = Field(default_factory=list)
    root_latency_ms: float = 0.0
    root_parameters: int = 0
    root_accuracy: Optional[float] = None
    goal_ms: float = 0.0
    schedule_ms: List[float] = Field(default_factory=list)
    search_skipped: bool = False
    steps: List[StepRecord] = Field(default_factory=list)
    bundles: List[ResultBundle] = Field(default_factory=list)
    cache: Optional[CacheStats] = None
    provider_calls: int = 0


class RunManifest(BaseModel):
    """
    Everything `prune` needs. Unknown keys are rejected and referenced files must exist.
    """
    model_config = ConfigDict(extra='forbid')

    model: str
    weights: Optional[str] = None
    provider: str = "analytical"
    cache: Optional[str] = None
    importance: Optional[str] = Field(None, description="Importance container overriding gradient importance.")
    goal: str = "0.5"
    steps: PositiveInt = Field(default_factory=lambda: get_settings().DEFAULT_STEPS)
    alive: PositiveInt = Field(default_factory=lambda: get_settings().DEFAULT_ALIVE_NODES)
    delta: str = Field(default_factory=lambda: get_settings().DEFAULT_DELTA_POLICY)
    early_stopping: bool = Field(default_factory=lambda: get_settings().EARLY_STOPPING)
    finetune: bool = True
    filter_by: Literal["step", "cumulative"] = "step"
    reductions: str = "sum,linf,sum"
    seed: int = 0
    workers: PositiveInt = Field(default_factory=lambda: get_settings().WORKERS)
    learning_rate: PositiveFloat = Field(default_factory=lambda: get_settings().TRAIN_LEARNING_RATE)
    batch_size: PositiveInt = Field(default_factory=lambda: get_settings().TRAIN_BATCH_SIZE)
    batches_per_step: PositiveInt = Field(default_factory=lambda: get_settings().TRAIN_BATCHES_PER_STEP)
    final_batches: PositiveInt = Field(default_factory=lambda: get_settings().FINAL_FINETUNE_BATCHES)
    noise_sigma: float = Field(default_factory=lambda: get_settings().LATENCY_NOISE_SIGMA, ge=0.0)
    dataset: Optional[DatasetSpec] = None
    out: str = Field(default_factory=lambda: get_settings().OUTPUT_DIR)

    @model_validator(mode='after')
    def _check_files(self) -> "RunManifest":
        required = [self.model]
        if self.weights:
            required.append(self.weights)
        if self.importance:
            required.append(self.importance)
        if self.provider.startswith("replay:"):
            required.append(self.provider.split(":", 1)[1])
        if self.dataset is not None and self.dataset.source == "csv-file":
            required.append(self.dataset.path)
        missing = [path for path in required if not Path(path).exists()]
        if missing:
            raise ValueError(f"referenced files do not exist: {', '.join(missing)}")
        return self

    def search_config(self) -> SearchConfig:
        train = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            batches_per_step=self.batches_per_step,
            seed=self.seed,
        )
        final_train = train.model_copy(update={"batches_per_step": self.final_batches})
        return SearchConfig(
            steps=self.steps,
            alive=self.alive,
            goal=LatencyGoal.parse(self.goal),
            step_policy=StepPolicy.parse(self.delta),
            early_stopping=self.early_stopping,
            reductions=ReductionConfig.parse(self.reductions),
            train=train,
            final_train=final_train,
            finetune=self.finetune,
            filter_by=self.filter_by,
            seed=self.seed,
            workers=self.workers,
        )
