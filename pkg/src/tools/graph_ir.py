import heapq
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from src.errors import GraphValidationError, PruningError, UnsupportedLayerError
from src.models.graph_models import (
    KNOWN_KINDS,
    ChannelGroup,
    Layer,
    LayerKind,
    ModelGraph,
    Port,
    PortRef,
    Signature,
    TensorSpec,
)
from src.utils import logger

Shape = Tuple[int, ...]

# Layers whose output carries the channel group of their (single) input.
_PASS_THROUGH = (
    LayerKind.RELU.value,
    LayerKind.MAXPOOL2D.value,
    LayerKind.AVGPOOL2D.value,
    LayerKind.GLOBAL_AVG_POOL.value,
    LayerKind.FLATTEN.value,
    LayerKind.OUTPUT.value,
)


def kernel_size(params: dict) -> Tuple[int, int]:
    kernel = params.get("kernel", 1)
    if isinstance(kernel, int):
        return kernel, kernel
    kh, kw = kernel
    return int(kh), int(kw)


def pool_window(params: dict) -> Tuple[int, int]:
    window = int(params.get("window", 2))
    stride = int(params.get("stride", window) or window)
    return window, stride


def topological_order(model: ModelGraph) -> List[Layer]:
    """
    Kahn's algorithm; among layers ready at the same time the lexicographically
    smallest id goes first, so the order (and everything derived from it) is deterministic.
    """
    layers = model.layer_map()
    indegree = {layer_id: 0 for layer_id in layers}
    consumers: Dict[str, List[str]] = {layer_id: [] for layer_id in layers}
    for layer in model.layers:
        for source in layer.inputs:
            if source in layers:
                indegree[layer.id] += 1
                consumers[source].append(layer.id)

    ready = [layer_id for layer_id, degree in indegree.items() if degree == 0]
    heapq.heapify(ready)
    order: List[Layer] = []
    while ready:
        layer_id = heapq.heappop(ready)
        order.append(layers[layer_id])
        for consumer in consumers[layer_id]:
            indegree[consumer] -= 1
            if indegree[consumer] == 0:
                heapq.heappush(ready, consumer)

    if len(order) != len(layers):
        stuck = sorted(layer_id for layer_id, degree in indegree.items() if degree > 0)
        raise GraphValidationError([f"{layer_id}: part of a cycle" for layer_id in stuck])
    return order


def _structural_violations(model: ModelGraph) -> List[str]:
    violations: List[str] = []
    seen = set()
    for layer in model.layers:
        if layer.id in seen:
            violations.append(f"{layer.id}: duplicate layer id")
        seen.add(layer.id)

    inputs = [layer for layer in model.layers if layer.kind == LayerKind.INPUT.value]
    outputs = [layer for layer in model.layers if layer.kind == LayerKind.OUTPUT.value]
    if len(inputs) != 1:
        violations.append(f"graph: expected exactly one Input layer, found {len(inputs)}")
    if len(outputs) != 1:
        violations.append(f"graph: expected exactly one Output layer, found {len(outputs)}")

    for layer in model.layers:
        if layer.kind not in KNOWN_KINDS:
            violations.append(f"{layer.id}: unsupported layer kind '{layer.kind}'")
            continue
        for source in layer.inputs:
            if source not in seen:
                violations.append(f"{layer.id}: input '{source}' does not exist")
        arity = len(layer.inputs)
        if layer.kind == LayerKind.INPUT.value and arity != 0:
            violations.append(f"{layer.id}: Input takes no inputs")
        elif layer.kind == LayerKind.ADD.value and arity < 2:
            violations.append(f"{layer.id}: Add requires at least 2 inputs")
        elif layer.kind not in (LayerKind.INPUT.value, LayerKind.ADD.value) and arity != 1:
            violations.append(f"{layer.id}: {layer.kind} takes exactly 1 input, got {arity}")
    return violations


def _weight_violations(model: ModelGraph, layer: Layer, expected: Shape, out_channels: int) -> List[str]:
    violations = []
    if "weight" not in layer.weight_names:
        return [f"{layer.id}: missing mandatory 'weight' tensor"]
    for role in layer.weight_names:
        key = layer.tensor_key(role)
        if key not in model.tensors:
            violations.append(f"{layer.id}: weight '{role}' does not resolve to a tensor")
            continue
        shape = tuple(model.tensors[key].shape)
        want = expected if role == "weight" else (out_channels,) if role == "bias" else None
        if want is None:
            violations.append(f"{layer.id}: unknown tensor role '{role}'")
        elif shape != want:
            violations.append(f"{layer.id}: {role} shape {list(shape)} does not match params {list(want)}")
    return violations


def _infer(model: ModelGraph, order: List[Layer], violations: List[str]) -> Dict[str, Optional[Shape]]:
    shapes: Dict[str, Optional[Shape]] = {}
    for layer in order:
        kind, params = layer.kind, layer.params
        source: Optional[Shape] = shapes.get(layer.inputs[0]) if layer.inputs else None
        try:
            if kind == LayerKind.INPUT.value:
                shapes[layer.id] = tuple(int(v) for v in params["shape"])

            elif kind == LayerKind.DENSE.value:
                n_in, n_out = int(params["in_features"]), int(params["out_features"])
                if source is not None:
                    if len(source) != 1:
                        violations.append(f"{layer.id}: Dense expects a flat input, got shape {list(source)}")
                    elif source[0] != n_in:
                        violations.append(f"{layer.id}: in_features={n_in} but producer '{layer.inputs[0]}' has {source[0]} channels")
                violations.extend(_weight_violations(model, layer, (n_out, n_in), n_out))
                shapes[layer.id] = (n_out,)

            elif kind == LayerKind.CONV2D.value:
                c_in, c_out = int(params["in_channels"]), int(params["out_channels"])
                kh, kw = kernel_size(params)
                stride, padding = int(params.get("stride", 1)), int(params.get("padding", 0))
                violations.extend(_weight_violations(model, layer, (c_out, c_in, kh, kw), c_out))
                shapes[layer.id] = None
                if source is not None:
                    if len(source) != 3:
                        violations.append(f"{layer.id}: Conv2d expects a (C, H, W) input, got shape {list(source)}")
                        continue
                    if source[0] != c_in:
                        violations.append(f"{layer.id}: in_channels={c_in} but producer '{layer.inputs[0]}' has {source[0]} channels")
                    h_out = (source[1] + 2 * padding - kh) // stride + 1
                    w_out = (source[2] + 2 * padding - kw) // stride + 1
                    if h_out < 1 or w_out < 1:
                        violations.append(f"{layer.id}: kernel larger than the padded input")
                        continue
                    shapes[layer.id] = (c_out, h_out, w_out)

            elif kind == LayerKind.ADD.value:
                incoming = [shapes.get(src) for src in layer.inputs]
                known = [shape for shape in incoming if shape is not None]
                if known and any(shape[0] != known[0][0] for shape in known):
                    counts = ", ".join(str(shape[0]) for shape in known)
                    violations.append(f"{layer.id}: Add inputs have different channel counts ({counts})")
                elif known and any(shape != known[0] for shape in known):
                    violations.append(f"{layer.id}: Add inputs have different shapes")
                shapes[layer.id] = known[0] if known else None

            elif kind in (LayerKind.MAXPOOL2D.value, LayerKind.AVGPOOL2D.value):
                window, stride = pool_window(params)
                shapes[layer.id] = None
                if source is not None:
                    if len(source) != 3:
                        violations.append(f"{layer.id}: {kind} expects a (C, H, W) input")
                        continue
                    h_out = (source[1] - window) // stride + 1
                    w_out = (source[2] - window) // stride + 1
                    if h_out < 1 or w_out < 1:
                        violations.append(f"{layer.id}: pooling window larger than the input")
                        continue
                    shapes[layer.id] = (source[0], h_out, w_out)

            elif kind == LayerKind.GLOBAL_AVG_POOL.value:
                if source is not None and len(source) != 3:
                    violations.append(f"{layer.id}: GlobalAvgPool expects a (C, H, W) input")
                    shapes[layer.id] = None
                else:
                    shapes[layer.id] = (source[0],) if source is not None else None

            elif kind == LayerKind.FLATTEN.value:
                shapes[layer.id] = (int(np.prod(source)),) if source is not None else None

            elif kind in (LayerKind.RELU.value, LayerKind.OUTPUT.value):
                shapes[layer.id] = source

            else:
                shapes[layer.id] = None
        except (KeyError, TypeError, ValueError) as e:
            violations.append(f"{layer.id}: malformed params for {kind} ({e})")
            shapes[layer.id] = None
    return shapes


def validate_graph(model: ModelGraph) -> List[str]:
    """
    Returns every broken Layer/ModelGraph rule as '<layer id>: <rule>'. Empty means valid.
    """
    violations = _structural_violations(model)
    if violations:
        return violations
    try:
        order = topological_order(model)
    except GraphValidationError as e:
        return e.violations
    _infer(model, order, violations)
    return violations


def require_valid(model: ModelGraph) -> None:
    violations = validate_graph(model)
    if violations:
        logger.error(f"Model graph failed validation with {len(violations)} violation(s): {violations}")
        raise GraphValidationError(violations)


def infer_shapes(model: ModelGraph) -> Dict[str, Shape]:
    """Output shape (without the batch axis) of every layer of a valid graph."""
    violations: List[str] = []
    shapes = _infer(model, topological_order(model), violations)
    if violations:
        raise GraphValidationError(violations)
    return shapes


class _UnionFind:
    def __init__(self):
        self.parent: Dict[Tuple[str, str], Tuple[str, str]] = {}
        self.visits: List[Tuple[str, str]] = []

    def make(self, key: Tuple[str, str]) -> Tuple[str, str]:
        if key not in self.parent:
            self.parent[key] = key
            self.visits.append(key)
        return key

    def find(self, key: Tuple[str, str]) -> Tuple[str, str]:
        root = key
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[key] != root:
            self.parent[key], key = root, self.parent[key]
        return root

    def union(self, a: Tuple[str, str], b: Tuple[str, str]) -> None:
        root_a, root_b = self.find(a), self.find(b)
        if root_a != root_b:
            self.parent[root_b] = root_a


def _port_size(layer: Layer, port: Port) -> int:
    if layer.kind == LayerKind.DENSE.value:
        return int(layer.params["in_features" if port == Port.INPUT else "out_features"])
    return int(layer.params["in_channels" if port == Port.INPUT else "out_channels"])


def build_channel_groups(model: ModelGraph) -> List[ChannelGroup]:
    """
    Partitions every Dense/Conv2d input and output port into channel groups with a union-find:
    producers' outputs join their consumers' inputs, pass-through layers forward their input
    group, and Add merges all of its inputs with its output. The groups holding the network
    input and the final logits are frozen.
    """
    for layer in model.layers:
        if layer.kind not in KNOWN_KINDS:
            logger.error(f"Cannot build channel groups: unsupported layer kind '{layer.kind}' ({layer.id})")
            raise UnsupportedLayerError(f"unsupported layer kind '{layer.kind}' (layer '{layer.id}')")
    require_valid(model)
    shapes = infer_shapes(model)

    uf = _UnionFind()
    out = lambda layer_id: (layer_id, Port.OUTPUT.value)
    input_id = output_id = None
    for layer in topological_order(model):
        kind = layer.kind
        if kind == LayerKind.INPUT.value:
            uf.make(out(layer.id))
            input_id = layer.id
        elif layer.is_prunable:
            port_in = uf.make((layer.id, Port.INPUT.value))
            uf.union(out(layer.inputs[0]), port_in)
            uf.make(out(layer.id))
        elif kind == LayerKind.ADD.value:
            uf.make(out(layer.id))
            for source in layer.inputs:
                uf.union(out(source), out(layer.id))
        elif kind in _PASS_THROUGH:
            if kind == LayerKind.FLATTEN.value:
                source_shape = shapes[layer.inputs[0]]
                if len(source_shape) == 3 and source_shape[1] * source_shape[2] != 1:
                    raise UnsupportedLayerError(
                        f"Flatten '{layer.id}' over a {source_shape[1]}x{source_shape[2]} spatial extent "
                        "mixes channels; pool to 1x1 first"
                    )
            uf.make(out(layer.id))
            uf.union(out(layer.inputs[0]), out(layer.id))
            if kind == LayerKind.OUTPUT.value:
                output_id = layer.id
        else:
            raise UnsupportedLayerError(f"unsupported layer kind '{kind}' (layer '{layer.id}')")

    layers = model.layer_map()
    frozen_roots = {uf.find(out(input_id)), uf.find(out(output_id))}
    index_of_root: Dict[Tuple[str, str], int] = {}
    groups: List[ChannelGroup] = []
    for key in uf.visits:
        layer_id, port = key
        if not layers[layer_id].is_prunable:
            continue
        root = uf.find(key)
        if root not in index_of_root:
            index_of_root[root] = len(groups)
            groups.append(ChannelGroup(
                index=len(groups),
                size=_port_size(layers[layer_id], Port(port)),
                prunable=root not in frozen_roots,
            ))
        groups[index_of_root[root]].members.append(PortRef(layer_id=layer_id, port=Port(port)))

    for group in groups:
        sizes = {_port_size(layers[m.layer_id], m.port) for m in group.members}
        if len(sizes) != 1:
            raise GraphValidationError([f"group {group.index}: member ports disagree on channel count {sorted(sizes)}"])
    logger.debug(f"Built {len(groups)} channel groups: {[g.size for g in groups]}")
    return groups


def port_groups(groups: Iterable[ChannelGroup]) -> Dict[Tuple[str, Port], int]:
    """(layer id, port) -> group index."""
    return {(m.layer_id, m.port): group.index for group in groups for m in group.members}


def group_size(model: ModelGraph, group: ChannelGroup) -> int:
    member = group.members[0]
    return _port_size(model.layer(member.layer_id), member.port)


def signature_of(model: ModelGraph, groups: List[ChannelGroup]) -> Signature:
    """Current channel count of every group, read from the model's layer params."""
    return Signature(counts=tuple(group_size(model, group) for group in groups))


def apply_pruning(model: ModelGraph, groups: List[ChannelGroup], group_index: int, channels: Iterable[int]) -> ModelGraph:
    """
    Removes `channels` (indices relative to `model`) from every member port of one group.
    Returns an independent copy; `model` is left untouched.
    """
    group = groups[group_index]
    if not group.prunable:
        raise PruningError(f"channel group {group_index} is not prunable")
    size = group_size(model, group)
    removed = sorted(set(int(c) for c in channels))
    if any(c < 0 or c >= size for c in removed):
        raise PruningError(f"channel indices {removed} out of range for group {group_index} of size {size}")
    if len(removed) >= size:
        raise PruningError(f"cannot remove all {size} channels of group {group_index}")

    pruned = model.clone()
    if not removed:
        return pruned
    layers = pruned.layer_map()
    for member in group.members:
        layer = layers[member.layer_id]
        axis = 0 if member.port == Port.OUTPUT else 1
        for role in layer.weight_names:
            if role == "bias" and member.port == Port.INPUT:
                continue
            key = layer.tensor_key(role)
            data = np.delete(pruned.tensors[key].data, removed, axis=axis)
            pruned.tensors[key] = TensorSpec(name=key, shape=list(data.shape), data=data)
        if layer.kind == LayerKind.DENSE.value:
            field = "out_features" if member.port == Port.OUTPUT else "in_features"
        else:
            field = "out_channels" if member.port == Port.OUTPUT else "in_channels"
        layer.params[field] = int(layer.params[field]) - len(removed)

    violations = validate_graph(pruned)
    if violations:
        raise PruningError(f"pruning group {group_index} produced an invalid graph: {violations}")
    return pruned


def parameter_count(model: ModelGraph) -> int:
    return int(sum(tensor.data.size for tensor in model.tensors.values()))
