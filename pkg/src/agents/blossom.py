from typing import List, Optional

import numpy as np

from src.agents.selection import CandidatePool
from src.models.graph_models import ChannelGroup
from src.models.latency_models import BenchmarkProtocol
from src.models.search_models import BlossomOutcome, Candidate, Node, SearchConfig, StepPolicy
from src.state import SearchState, SearchServices
from src.tools.graph_ir import apply_pruning
from src.tools.importance import importance_loss, select_channels
from src.tools.latency_cache import get_or_measure
from src.utils import logger


def latency_schedule(tau0: float, tau_s: float, steps: int, i: int) -> float:
    """Uniform schedule tau_i = ((s - i) * tau_0 + i * tau_s) / s; the last step hits tau_s exactly."""
    if steps < 1 or not 1 <= i <= steps:
        raise ValueError(f"step {i} outside 1..{steps}")
    if not tau_s < tau0:
        raise ValueError(f"latency goal {tau_s} must be below the root latency {tau0}")
    if i == steps:
        return float(tau_s)
    return ((steps - i) * tau0 + i * tau_s) / steps


def exploration_step(channels: int, policy: StepPolicy) -> int:
    """
    Channels removed per latency probe. sqrt: the power of two 2^ceil(log2(sqrt(C)));
    log: max(1, ceil(log2(C))); fixed: the configured size.
    """
    if channels < 1:
        raise ValueError(f"exploration step needs at least one channel, got {channels}")
    ceil_log2 = (channels - 1).bit_length()
    if policy.kind == "sqrt":
        return 1 << ((ceil_log2 + 1) // 2)
    if policy.kind == "log":
        return max(1, ceil_log2)
    return policy.size


def blossom(parent: Node, group_index: int, tau_i: float, groups: List[ChannelGroup], importance: np.ndarray,
            services: SearchServices, config: SearchConfig, threshold: Optional[float] = None,
            base_score: float = 0.0, order: int = 0) -> BlossomOutcome:
    """
    Strips the least important channels of one group, `delta(current count)` at a time,
    probing latency through the cache after each removal, until the model fits tau_i.

    Returns a child candidate, no-child when the group bottoms out above tau_i, or
    early-stopped when `base_score + loss` already exceeds the armed threshold.
    """
    size = parent.signature[group_index]
    floor = config.min_channels_per_group
    removed, probes, loss = 0, 0, 0.0
    if size <= floor:
        return BlossomOutcome(status="no-child")

    while True:
        removed = min(removed + exploration_step(size - removed, config.step_policy), size - floor)
        pruned = select_channels(importance, removed)
        loss = importance_loss(importance, pruned)
        if threshold is not None and base_score + loss > threshold:
            logger.debug(f"BLOSSOM: node {parent.id} group {group_index} early-stopped at loss {loss:.6g}")
            return BlossomOutcome(status="early-stopped", probes=probes, loss=loss)

        signature = parent.signature.with_count(group_index, size - removed)
        ms = get_or_measure(
            services.cache, services.provider, None, signature,
            materialize=lambda pruned=pruned: apply_pruning(parent.model, groups, group_index, pruned),
            protocol=BenchmarkProtocol.exploration(),
        )
        probes += 1
        if ms <= tau_i:
            candidate = Candidate(
                parent_id=parent.id, group=group_index, pruned=pruned, signature=signature,
                step_loss=loss, score=base_score + loss, latency_ms=ms, order=order,
            )
            return BlossomOutcome(status="child", candidate=candidate, probes=probes, loss=loss)
        if removed == size - floor:
            return BlossomOutcome(status="no-child", probes=probes, loss=loss)


def blossom_node(state: SearchState) -> SearchState:
    """
    Blossom node: every alive node proposes one child per prunable channel group.
    - Groups are visited in ascending index, parents in alive order.
    - Children go straight into the step's candidate pool, which also arms early stopping.
    """
    config, services, tree, groups = state["config"], state["services"], state["tree"], state["groups"]
    step = state["step"]
    tau_i = state["schedule_ms"][step - 1]
    logger.info(f"---BLOSSOM: step {step}/{config.steps}, latency goal {tau_i:.6g} ms---")

    record = state["report"].steps[-1]
    pool = CandidatePool(tree, config.alive)
    calls_before = services.provider.calls
    order = 0
    for parent in tree.alive_nodes():
        importances = state["importances"][parent.id]
        base = parent.cumulative_loss if config.filter_by == "cumulative" else 0.0
        for group in groups:
            if not group.prunable:
                continue
            threshold = pool.threshold() if config.early_stopping else None
            outcome = blossom(parent, group.index, tau_i, groups, importances[group.index], services, config,
                              threshold=threshold, base_score=base, order=order)
            record.probes += outcome.probes
            if outcome.status == "child":
                order += 1
                pool.offer(outcome.candidate)
            elif outcome.status == "early-stopped":
                record.early_stops += 1
            else:
                record.no_child += 1

    record.candidates = len(pool)
    record.duplicates = pool.dropped
    record.provider_calls = services.provider.calls - calls_before
    logger.info(
        f"BLOSSOM: {record.candidates} candidate(s), {record.probes} probe(s), {record.provider_calls} provider call(s), "
        f"{record.early_stops} early stop(s), {record.no_child} group(s) without child, {record.duplicates} duplicate(s)"
    )
    return {"candidates": pool, "report": state["report"]}
