from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Tuple

from src.errors import ManifestError
from src.models.graph_models import ModelGraph
from src.models.importance_models import ImportanceState
from src.models.search_models import Node, SearchConfig, StepRecord
from src.models.training_models import Dataset, TrainConfig
from src.state import SearchServices, SearchState
from src.tools.datasets import iter_batches
from src.tools.executor import loss_and_grads, sgd_step
from src.tools.importance import GradientImportance, ImportanceSource, accumulate_model
from src.utils import derive_seed, logger


def importance_source(services: SearchServices, config: SearchConfig) -> ImportanceSource:
    return services.importance or GradientImportance(config.reductions)


def train(model: ModelGraph, dataset: Dataset, train_config: TrainConfig, seed: int, update: bool = True,
          state: Optional[ImportanceState] = None) -> Tuple[ModelGraph, Optional[ImportanceState], float]:
    """
    Runs `batches_per_step` SGD batches on a copy of `model`. With `state`, every batch's
    |W * dL/dW| is accumulated before the update. `update=False` only gathers gradients.
    Returns (model, state, mean loss).
    """
    working = model.clone() if update else model
    losses = []
    for batch in iter_batches(dataset.train, train_config.batch_size, train_config.batches_per_step, seed):
        loss, grads = loss_and_grads(working, batch)
        losses.append(loss)
        if state is not None:
            accumulate_model(state, working, grads)
        if update:
            sgd_step(working, grads, train_config.learning_rate)
    return working, state, sum(losses) / len(losses) if losses else 0.0


def finetune_one(node: Node, config: SearchConfig, services: SearchServices) -> Tuple[ModelGraph, Optional[ImportanceState]]:
    """
    One node's share of a pruning step. The root only backpropagates (it needs no accuracy
    recovery); so does every node when fine-tuning is disabled.
    """
    source = importance_source(services, config)
    update = config.finetune and node.parent is not None
    if not update and not source.needs_gradients:
        return node.model, None
    if services.dataset is None:
        raise ManifestError("fine-tuning and gradient importance need a dataset")
    seed = derive_seed(config.seed, node.id)
    state = ImportanceState() if source.needs_gradients else None
    model, state, loss = train(node.model, services.dataset, config.train, seed, update=update, state=state)
    logger.debug(f"FINETUNE: node {node.id} mean loss {loss:.6g} ({'updated' if update else 'gradients only'})")
    return model, state


def finetune_node(state: SearchState) -> SearchState:
    """
    Fine-tune node: trains every alive node for one step and gathers its channel importance.
    - Nodes are independent and run on a thread pool; seeds derive from (run seed, node id).
    """
    config, services, tree, groups = state["config"], state["services"], state["tree"], state["groups"]
    step = state["step"]
    alive = tree.alive_nodes()
    logger.info(f"---FINETUNE: step {step}, {len(alive)} alive node(s), {services.workers} worker(s)---")

    with ThreadPoolExecutor(max_workers=max(1, services.workers)) as pool:
        results = list(pool.map(lambda node: finetune_one(node, config, services), alive))

    source = importance_source(services, config)
    importances = {}
    batches = 0
    for node, (model, importance_state) in zip(alive, results):
        node.model = model
        importances[node.id] = source.group_importances(node, groups, importance_state)
        batches = max(batches, importance_state.batches if importance_state is not None else 0)

    state["report"].steps.append(StepRecord(step=step, tau_ms=state["schedule_ms"][step - 1], importance_batches=batches))
    return {"tree": tree, "importances": importances, "report": state["report"]}


def final_finetune_node(state: SearchState) -> SearchState:
    """
    Final fine-tune node: recovers accuracy of the surviving models with the final training budget.
    """
    config, services, tree = state["config"], state["services"], state["tree"]
    if not config.finetune or services.dataset is None or state["search_skipped"]:
        logger.info("---FINAL FINETUNE: skipped---")
        return {}
    alive: List[Node] = tree.alive_nodes()
    logger.info(f"---FINAL FINETUNE: {len(alive)} model(s), {config.final_train.batches_per_step} batches each---")

    def run(node: Node) -> ModelGraph:
        model, _, loss = train(node.model, services.dataset, config.final_train, derive_seed(config.seed, node.id, "final"))
        logger.info(f"FINAL FINETUNE: node {node.id} mean loss {loss:.6g}")
        return model

    with ThreadPoolExecutor(max_workers=max(1, services.workers)) as pool:
        models = list(pool.map(run, alive))
    for node, model in zip(alive, models):
        node.model = model
    return {"tree": tree}
