from typing import List, Tuple

import numpy as np
from langgraph.graph import END, StateGraph

from src.agents.benchmark import benchmark_node, measure_root_node
from src.agents.blossom import blossom_node
from src.agents.finetune import final_finetune_node, finetune_node
from src.agents.selection import select_node
from src.models.graph_models import ModelGraph
from src.models.search_models import Node, ResultBundle, RunReport, SearchConfig, Tree
from src.state import SearchServices, SearchState
from src.tools.graph_ir import build_channel_groups, parameter_count, require_valid, signature_of
from src.utils import logger


def create_archtree_workflow():
    """
    Defines and compiles the LangGraph workflow of one Archtree run.
    """
    workflow = StateGraph(SearchState)

    # 1. Add nodes for each stage
    workflow.add_node("measure_root", measure_root_node)
    workflow.add_node("finetune", finetune_node)
    workflow.add_node("blossom", blossom_node)
    workflow.add_node("select", select_node)
    workflow.add_node("final_finetune", final_finetune_node)
    workflow.add_node("benchmark", benchmark_node)

    # 2. Entry point: the root latency fixes the schedule
    workflow.set_entry_point("measure_root")

    def search_or_skip(state: SearchState) -> str:
        if state["search_skipped"]:
            logger.info("ORCHESTRATOR: goal already met by the root. Skipping the search.")
            return "skip"
        return "search"

    workflow.add_conditional_edges("measure_root", search_or_skip, {"search": "finetune", "skip": "benchmark"})

    # 3. One pruning step
    workflow.add_edge("finetune", "blossom")
    workflow.add_edge("blossom", "select")

    def continue_or_finish(state: SearchState) -> str:
        if state["step"] <= state["config"].steps:
            logger.info(f"ORCHESTRATOR: proceeding to pruning step {state['step']}.")
            return "continue"
        logger.info("ORCHESTRATOR: all pruning steps done. Proceeding to final fine-tuning.")
        return "finish"

    workflow.add_conditional_edges("select", continue_or_finish, {"continue": "finetune", "finish": "final_finetune"})
    workflow.add_edge("final_finetune", "benchmark")
    workflow.add_edge("benchmark", END)

    # 4. Compile the graph
    app = workflow.compile()
    logger.info("LangGraph workflow compiled successfully.")
    return app


def initial_state(model: ModelGraph, config: SearchConfig, services: SearchServices) -> SearchState:
    """Validates the model, derives its channel groups and plants the root of the tree."""
    require_valid(model)
    groups = build_channel_groups(model)
    signature = signature_of(model, groups)
    tree = Tree()
    tree.add(Node(id=0, signature=signature, model=model, kept=[np.arange(group.size) for group in groups]))
    tree.alive = [0]

    report = RunReport(
        config=config.model_dump(mode='json'),
        dataset=services.dataset.spec.model_dump(mode='json') if services.dataset is not None else None,
        provider=services.provider.fingerprint_params(),
        root_signature=list(signature.counts),
        root_parameters=parameter_count(model),
    )
    logger.info(f"ORCHESTRATOR: {len(groups)} channel groups, root signature {signature}")
    return {
        "config": config, "services": services, "root": model, "groups": groups, "tree": tree,
        "tau0_ms": 0.0, "goal_ms": 0.0, "schedule_ms": [], "step": 1, "search_skipped": False,
        "importances": {}, "candidates": [], "report": report, "bundles": [],
    }


def prune_step(state: SearchState) -> SearchState:
    """One loop body (fine-tune, blossom, select) without going through the graph."""
    for node in (finetune_node, blossom_node, select_node):
        state.update(node(state))
    return state


def run_archtree(model: ModelGraph, config: SearchConfig, services: SearchServices) -> Tuple[List[ResultBundle], RunReport]:
    """
    Runs the full search: root benchmark, `steps` pruning steps, final fine-tuning and final benchmark.
    Returns the result bundles (best validation accuracy first) and the run report.
    """
    logger.info("--- Starting Archtree run ---")
    app = create_archtree_workflow()
    state = initial_state(model, config, services)
    final_state = app.invoke(state, config={"recursion_limit": 3 * config.steps + 10})
    if services.cache.path is not None:
        services.cache.save_events()
    logger.info("--- Archtree run completed ---")
    return final_state["bundles"], final_state["report"]


if __name__ == "__main__":
    from src.cli import main

    raise SystemExit(main())
