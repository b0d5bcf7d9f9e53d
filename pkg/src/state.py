from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, TypedDict

from src.models.graph_models import ChannelGroup, ModelGraph
from src.models.search_models import ResultBundle, RunReport, SearchConfig, Tree
from src.models.training_models import Dataset

if TYPE_CHECKING:
    from src.tools.importance import ImportanceSource
    from src.tools.latency import LatencyProvider
    from src.tools.latency_cache import LatencyCache


@dataclass
class SearchServices:
    """
    Long-lived collaborators of a search: the latency oracle, its cache, the fine-tuning
    data and where channel importance comes from. `importance=None` means gradient importance.
    """
    provider: "LatencyProvider"
    cache: "LatencyCache"
    dataset: Optional[Dataset] = None
    importance: Optional["ImportanceSource"] = None
    workers: int = 1


class SearchState(TypedDict):
    """
    Represents the shared state of the Archtree workflow.
    This state is passed between LangGraph nodes.
    """
    config: SearchConfig
    services: SearchServices
    root: ModelGraph
    groups: List[ChannelGroup] # Channel groups of the root, valid for every node
    tree: Tree

    tau0_ms: float # Final-grade latency of the root (measure_root)
    goal_ms: float
    schedule_ms: List[float] # tau_1..tau_s
    step: int # Index of the next pruning step, starting at 1
    search_skipped: bool # True when the goal is not below the root latency

    importances: Dict[int, List] # node id -> per-group importance vectors of the current step
    candidates: List # Candidates produced by blossom, consumed by select

    report: RunReport
    bundles: List[ResultBundle]
