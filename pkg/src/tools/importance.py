from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from src.errors import ShapeMismatchError
from src.models.graph_models import ChannelGroup, ModelGraph, Port
from src.models.importance_models import ImportanceState, Reduction, ReductionConfig
from src.models.search_models import Node
from src.models.training_models import GradientStore
from src.tools.graph_ir import port_groups
from src.tools.model_io import load_tensors, save_tensors
from src.utils import logger


def _reduce(values: np.ndarray, reduction: Reduction, axis) -> np.ndarray:
    if reduction == Reduction.SUM:
        return values.sum(axis=axis)
    if reduction == Reduction.MEAN:
        return values.mean(axis=axis)
    return np.abs(values).max(axis=axis)


def accumulate(state: ImportanceState, weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> ImportanceState:
    """
    state[l] += |W_l * dL/dW_l| for one batch-mean gradient.
    """
    for name, weight in weights.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        weight = np.asarray(weight, dtype=np.float64)
        if weight.shape != grad.shape:
            raise ShapeMismatchError(f"importance of '{name}': weight {weight.shape} vs gradient {grad.shape}")
        contribution = np.abs(weight * grad)
        if name in state.accumulators:
            if state.accumulators[name].shape != contribution.shape:
                raise ShapeMismatchError(f"importance accumulator '{name}' has shape {state.accumulators[name].shape}")
            state.accumulators[name] = state.accumulators[name] + contribution
        else:
            state.accumulators[name] = contribution
    state.batches += 1
    return state


def accumulate_model(state: ImportanceState, model: ModelGraph, grads: GradientStore) -> ImportanceState:
    """Feeds the weight tensors of every Dense/Conv2d layer into accumulate(); biases do not count."""
    weights, layer_grads = {}, {}
    for layer in model.layers:
        if layer.is_prunable:
            weights[layer.id] = model.weight(layer)
            layer_grads[layer.id] = grads[layer.tensor_key("weight")]
    return accumulate(state, weights, layer_grads)


def spatial_reduce(importance: np.ndarray, reduction: Reduction) -> np.ndarray:
    """o x i (Dense, unchanged) or o x i x kh x kw (Conv2d, reduced over the kernel) -> o x i."""
    if importance.ndim == 2:
        return importance
    return _reduce(importance.reshape(importance.shape[0], importance.shape[1], -1), reduction, axis=2)


def neural_reduce(matrix: np.ndarray, port: Port, reduction: Reduction) -> np.ndarray:
    """Output port -> length-o vector (reduce over inputs); input port -> length-i vector."""
    return _reduce(matrix, reduction, axis=1 if Port(port) == Port.OUTPUT else 0)


def group_reduce(vectors: Sequence[np.ndarray], reduction: Reduction) -> np.ndarray:
    lengths = {len(v) for v in vectors}
    if len(lengths) != 1:
        raise ShapeMismatchError(f"member-port importance vectors disagree on length: {sorted(lengths)}")
    return _reduce(np.stack([np.asarray(v, dtype=np.float64) for v in vectors]), reduction, axis=0)


def reduce_groups(per_layer: Dict[str, np.ndarray], groups: List[ChannelGroup], reductions: ReductionConfig) -> List[np.ndarray]:
    """Full pipeline: per-layer importance tensors -> one importance vector per channel group."""
    result = []
    for group in groups:
        vectors = []
        for member in group.members:
            matrix = spatial_reduce(per_layer[member.layer_id], reductions.spatial)
            vectors.append(neural_reduce(matrix, member.port, reductions.neural))
        result.append(group_reduce(vectors, reductions.group))
    return result


def select_channels(importance: np.ndarray, count: int) -> Tuple[int, ...]:
    """The `count` least important channels, ties toward the lower index, sorted ascending."""
    size = len(importance)
    if count < 1 or count >= size:
        raise ValueError(f"cannot select {count} of {size} channels (need 1 <= count < {size})")
    return tuple(sorted(int(i) for i in np.argsort(importance, kind='stable')[:count]))


def importance_loss(importance: np.ndarray, pruned: Iterable[int]) -> float:
    indices = list(pruned)
    if not indices:
        return 0.0
    return float(np.sum(np.asarray(importance, dtype=np.float64)[indices]))


class ImportanceSource(Protocol):
    """Produces the per-group channel importance of a node for the current step."""
    needs_gradients: bool

    def group_importances(self, node: Node, groups: List[ChannelGroup], state: Optional[ImportanceState]) -> List[np.ndarray]:
        ...


class GradientImportance:
    """
    Importance gathered from |W * dL/dW| over the step's fine-tuning batches.
    """
    needs_gradients = True

    def __init__(self, reductions: Optional[ReductionConfig] = None):
        self.reductions = reductions or ReductionConfig()

    def group_importances(self, node: Node, groups: List[ChannelGroup], state: Optional[ImportanceState]) -> List[np.ndarray]:
        accumulators = dict(state.accumulators) if state is not None else {}
        for group in groups:
            for member in group.members:
                if member.layer_id not in accumulators:
                    layer = node.model.layer(member.layer_id)
                    accumulators[member.layer_id] = np.zeros(node.model.weight(layer).shape)
        return reduce_groups(accumulators, groups, self.reductions)


class FixedImportance:
    """
    Externally supplied importance tensors in root-model coordinates, keyed by layer id.
    Each node sees them sliced down to the channels it still keeps.
    """
    needs_gradients = False

    def __init__(self, tensors: Dict[str, np.ndarray], reductions: Optional[ReductionConfig] = None):
        self.tensors = {self._layer_key(name): np.abs(np.asarray(t, dtype=np.float64)) for name, t in tensors.items()}
        self.reductions = reductions or ReductionConfig()

    @staticmethod
    def _layer_key(name: str) -> str:
        return name[:-len(".weight")] if name.endswith(".weight") else name

    def sliced(self, node: Node, groups: List[ChannelGroup]) -> Dict[str, np.ndarray]:
        owners = port_groups(groups)
        per_layer = {}
        for layer in node.model.layers:
            if not layer.is_prunable:
                continue
            if layer.id not in self.tensors:
                raise ShapeMismatchError(f"no importance tensor for layer '{layer.id}'")
            tensor = self.tensors[layer.id]
            tensor = np.take(tensor, node.kept[owners[(layer.id, Port.OUTPUT)]], axis=0)
            tensor = np.take(tensor, node.kept[owners[(layer.id, Port.INPUT)]], axis=1)
            expected = node.model.weight(layer).shape
            if tensor.shape != expected:
                raise ShapeMismatchError(f"importance of '{layer.id}' sliced to {tensor.shape}, weight is {expected}")
            per_layer[layer.id] = tensor
        return per_layer

    def group_importances(self, node: Node, groups: List[ChannelGroup], state: Optional[ImportanceState]) -> List[np.ndarray]:
        return reduce_groups(self.sliced(node, groups), groups, self.reductions)


def save_importances(tensors: Dict[str, np.ndarray], path: Path) -> Path:
    return save_tensors(tensors, path, {"kind": "importance"})


def load_importances(path: Path, reductions: Optional[ReductionConfig] = None) -> FixedImportance:
    tensors, _ = load_tensors(path)
    logger.info(f"Loaded {len(tensors)} importance tensors from {path}")
    return FixedImportance(tensors, reductions)
