from typing import List, Optional, Tuple

import pandas as pd

from src.agents.blossom import exploration_step, latency_schedule
from src.errors import PruningError
from src.models.graph_models import ChannelGroup, ModelGraph
from src.models.latency_models import BenchmarkProtocol
from src.models.search_models import ResultBundle, StepPolicy
from src.state import SearchState
from src.tools.executor import evaluate
from src.tools.graph_ir import apply_pruning, parameter_count, signature_of
from src.tools.latency import LatencyProvider
from src.tools.latency_cache import LatencyCache, get_or_measure
from src.utils import logger


def measure_root_node(state: SearchState) -> SearchState:
    """
    Root benchmark node: measures tau_0 with the final-grade protocol (bypassing the cache)
    and derives the latency schedule.
    """
    config, services, tree = state["config"], state["services"], state["tree"]
    root = tree.root
    logger.info(f"---ROOT BENCHMARK: measuring {root.signature}---")
    tau0 = services.provider.measure(root.model, root.signature, BenchmarkProtocol.final())
    root.latency_ms = tau0
    goal = config.goal.resolve(tau0)

    report = state["report"]
    report.root_latency_ms = tau0
    report.goal_ms = goal
    if services.dataset is not None:
        report.root_accuracy = evaluate(root.model, services.dataset.validation)

    if goal >= tau0:
        logger.warning(f"ROOT BENCHMARK: goal {goal:.6g} ms is not below the root latency {tau0:.6g} ms; returning the root")
        report.search_skipped = True
        return {"tau0_ms": tau0, "goal_ms": goal, "schedule_ms": [], "search_skipped": True, "report": report}

    schedule = [latency_schedule(tau0, goal, config.steps, i) for i in range(1, config.steps + 1)]
    report.schedule_ms = schedule
    logger.info(f"ROOT BENCHMARK: tau_0 = {tau0:.6g} ms, goal {goal:.6g} ms, schedule {[round(t, 6) for t in schedule]}")
    return {"tau0_ms": tau0, "goal_ms": goal, "schedule_ms": schedule, "search_skipped": False, "report": report}


def benchmark_node(state: SearchState) -> SearchState:
    """
    Final benchmark node: re-measures every surviving model with the final-grade protocol,
    evaluates it, and orders the bundles by validation accuracy.
    """
    services, tree = state["services"], state["tree"]
    alive = tree.alive_nodes()
    logger.info(f"---BENCHMARK: {len(alive)} surviving model(s)---")

    bundles = []
    for node in alive:
        ms = services.provider.measure(node.model, node.signature, BenchmarkProtocol.final())
        accuracy = evaluate(node.model, services.dataset.validation) if services.dataset is not None else None
        bundles.append(ResultBundle(
            rank=0, node_id=node.id, signature=list(node.signature.counts), latency_ms=ms, accuracy=accuracy,
            parameters=parameter_count(node.model), step_loss=node.step_loss,
            cumulative_loss=node.cumulative_loss, model=node.model,
        ))
        if not state["search_skipped"] and ms > state["goal_ms"]:
            logger.warning(f"BENCHMARK: node {node.id} measured {ms:.6g} ms above the goal {state['goal_ms']:.6g} ms")

    bundles.sort(key=lambda b: (-(b.accuracy if b.accuracy is not None else 0.0), b.cumulative_loss, b.signature))
    for rank, bundle in enumerate(bundles, start=1):
        bundle.rank = rank

    report = state["report"]
    report.bundles = bundles
    report.cache = services.cache.stats()
    report.provider_calls = services.provider.calls
    return {"bundles": bundles, "report": report}


def latency_sweep(model: ModelGraph, groups: List[ChannelGroup], group_index: int, provider: LatencyProvider,
                  policy: Optional[StepPolicy] = None, cache: Optional[LatencyCache] = None) -> List[Tuple[int, float]]:
    """
    Latency while one group shrinks from its full width to a single channel, removing trailing
    channels. `policy=None` probes every width; otherwise widths follow the exploration step.
    """
    group = groups[group_index]
    if not group.prunable:
        raise PruningError(f"channel group {group_index} is not prunable")
    signature = signature_of(model, groups)
    size = signature[group_index]
    rows = []
    channels = size
    while True:
        probe = signature.with_count(group_index, channels)
        materialize = lambda channels=channels: apply_pruning(model, groups, group_index, range(channels, size))
        if cache is not None:
            ms = get_or_measure(cache, provider, None, probe, materialize=materialize)
        else:
            ms = provider.measure(materialize() if provider.consumes_model else None, probe)
        rows.append((channels, ms))
        if channels == 1:
            return rows
        step = 1 if policy is None else exploration_step(channels, policy)
        channels = max(1, channels - step)


def latency_curve(model: ModelGraph, groups: List[ChannelGroup], group_index: int, provider: LatencyProvider,
                  policy: Optional[StepPolicy] = None, cache: Optional[LatencyCache] = None) -> pd.DataFrame:
    """Fine (one channel at a time) and adaptive sweeps as one frame: channels_left, ms, sweep."""
    policy = policy or StepPolicy()
    rows = [{"channels_left": c, "ms": ms, "sweep": "fine"}
            for c, ms in latency_sweep(model, groups, group_index, provider, None, cache)]
    rows += [{"channels_left": c, "ms": ms, "sweep": "adaptive"}
             for c, ms in latency_sweep(model, groups, group_index, provider, policy, cache)]
    return pd.DataFrame(rows, columns=["channels_left", "ms", "sweep"])
