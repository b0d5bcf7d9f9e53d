from typing import Dict, Iterable, List, Optional

import numpy as np

from src.errors import InfeasibleGoalError
from src.models.graph_models import ChannelGroup, Signature
from src.models.search_models import Candidate, Node, Tree
from src.state import SearchState
from src.tools.graph_ir import apply_pruning
from src.utils import logger


def _rank(candidate: Candidate):
    return candidate.score, candidate.signature.counts


class CandidatePool:
    """
    The step's children, deduplicated as they arrive:
    - a signature already in the tree (alive or dead) is dropped;
    - children sharing a signature keep the lowest score, the first generated on ties.
    Once `alive` distinct children exist, threshold() is the alive-th best score.
    """
    def __init__(self, tree: Tree, alive: int):
        self.tree = tree
        self.alive = alive
        self.best: Dict[Signature, Candidate] = {}
        self.dropped = 0

    def offer(self, candidate: Candidate) -> bool:
        if candidate.signature in self.tree.registry:
            self.dropped += 1
            logger.debug(f"SELECTION: {candidate.signature} already exists in the tree, dropped")
            return False
        existing = self.best.get(candidate.signature)
        if existing is not None:
            self.dropped += 1
            if candidate.score >= existing.score:
                return False
        self.best[candidate.signature] = candidate
        return True

    def threshold(self) -> Optional[float]:
        if len(self.best) < self.alive:
            return None
        return sorted(c.score for c in self.best.values())[self.alive - 1]

    def candidates(self) -> List[Candidate]:
        return sorted(self.best.values(), key=lambda c: c.order)

    def kept(self) -> List[Candidate]:
        return importance_filter(self.best.values(), self.alive)

    def __len__(self) -> int:
        return len(self.best)


def uniqueness(candidates: Iterable[Candidate], tree: Tree) -> List[Candidate]:
    """Drops children whose signature exists anywhere in the tree or earlier in `candidates`."""
    pool = CandidatePool(tree, alive=1)
    for candidate in candidates:
        pool.offer(candidate)
    return pool.candidates()


def importance_filter(candidates: Iterable[Candidate], alive: int) -> List[Candidate]:
    """The `alive` lowest scores; ties by lexicographic signature."""
    return sorted(candidates, key=_rank)[:alive]


def death(tree: Tree, parents: Iterable[int]) -> None:
    for node_id in parents:
        tree.nodes[node_id].alive = False


def admit(tree: Tree, candidate: Candidate, groups: List[ChannelGroup], step: int) -> Node:
    """Materializes a kept child and registers it in the tree."""
    parent = tree.nodes[candidate.parent_id]
    kept = [channels.copy() for channels in parent.kept]
    kept[candidate.group] = np.delete(kept[candidate.group], list(candidate.pruned))
    node = Node(
        id=tree.next_id(),
        signature=candidate.signature,
        model=apply_pruning(parent.model, groups, candidate.group, candidate.pruned),
        parent=parent.id,
        step=step,
        step_loss=candidate.step_loss,
        cumulative_loss=parent.cumulative_loss + candidate.step_loss,
        latency_ms=candidate.latency_ms,
        alive=True,
        kept=kept,
    )
    return tree.add(node)


def select_node(state: SearchState) -> SearchState:
    """
    Selection node: Uniqueness, Loss, Death and Importance filter of one pruning step.
    - Parents of this step die.
    - The `alive` best children become the new alive set.
    """
    config, tree, groups, pool = state["config"], state["tree"], state["groups"], state["candidates"]
    step = state["step"]
    logger.info(f"---SELECTION: step {step}, {len(pool)} unique candidate(s) for {config.alive} slot(s)---")

    if len(pool) == 0:
        logger.error(f"SELECTION: no child meets the latency goal at step {step}")
        raise InfeasibleGoalError(step)

    death(tree, tree.alive)
    survivors = [admit(tree, candidate, groups, step) for candidate in pool.kept()]
    tree.alive = [node.id for node in survivors]

    record = state["report"].steps[-1]
    record.alive = [list(node.signature.counts) for node in survivors]
    record.losses = [node.step_loss for node in survivors]
    record.cache = state["services"].cache.stats().model_copy(update={"events": []})
    for node in survivors:
        logger.info(
            f"SELECTION: kept node {node.id} {node.signature} from parent {node.parent} "
            f"(loss {node.step_loss:.6g}, latency {node.latency_ms:.6g} ms)"
        )
    return {"tree": tree, "candidates": [], "step": step + 1, "report": state["report"]}
