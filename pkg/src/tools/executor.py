"""
Reference forward/backward engine for the layer kinds of the model graph.

Everything is computed in float64 and stored back as float32. `params` lets callers
substitute float64 tensors for the stored ones (finite-difference checks do this).
"""
from typing import Dict, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import ShapeMismatchError
from src.models.graph_models import Layer, LayerKind, ModelGraph, TensorSpec
from src.models.training_models import Batch, GradientStore
from src.tools.graph_ir import kernel_size, pool_window, topological_order
from src.utils import logger

Params = Optional[Dict[str, np.ndarray]]
Cache = Dict[str, dict]

_EVAL_CHUNK = 256


def _tensor(model: ModelGraph, layer: Layer, role: str, params: Params) -> Optional[np.ndarray]:
    if not model.has_tensor(layer, role):
        return None
    key = layer.tensor_key(role)
    if params is not None and key in params:
        return np.asarray(params[key], dtype=np.float64)
    return model.tensors[key].data.astype(np.float64)


def _as_inputs(batch: Union[Batch, np.ndarray]) -> np.ndarray:
    return np.asarray(batch.inputs if isinstance(batch, Batch) else batch, dtype=np.float64)


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C, Ho, Wo, kh, kw) strided view."""
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(grad_windows: np.ndarray, shape: Tuple[int, ...], stride: int) -> np.ndarray:
    """Adjoint of _windows: sums window gradients back onto the (B, C, H, W) grid."""
    out = np.zeros(shape, dtype=np.float64)
    h_out, w_out, kh, kw = grad_windows.shape[2:]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += grad_windows[..., i, j]
    return out


def forward(model: ModelGraph, batch: Union[Batch, np.ndarray], params: Params = None) -> Tuple[np.ndarray, Cache]:
    """
    Runs the network on a batch. Returns the logits (batch x classes) and the cached
    activations needed by backward().
    """
    x = _as_inputs(batch)
    acts: Dict[str, np.ndarray] = {}
    cache: Cache = {}
    output_id = None

    for layer in topological_order(model):
        kind = layer.kind
        src = acts[layer.inputs[0]] if layer.inputs else None

        if kind == LayerKind.INPUT.value:
            expected = tuple(int(v) for v in layer.params["shape"])
            if x.shape[1:] != expected:
                if x.ndim >= 2 and int(np.prod(x.shape[1:])) == int(np.prod(expected)):
                    x = x.reshape((x.shape[0],) + expected)
                else:
                    raise ShapeMismatchError(f"batch inputs {list(x.shape[1:])} do not match Input shape {list(expected)}")
            out = x

        elif kind == LayerKind.DENSE.value:
            weight, bias = _tensor(model, layer, "weight", params), _tensor(model, layer, "bias", params)
            if src.ndim != 2 or src.shape[1] != weight.shape[1]:
                raise ShapeMismatchError(f"{layer.id}: expected {weight.shape[1]} features, got {list(src.shape[1:])}")
            out = src @ weight.T
            if bias is not None:
                out = out + bias
            cache[layer.id] = {"x": src}

        elif kind == LayerKind.CONV2D.value:
            weight, bias = _tensor(model, layer, "weight", params), _tensor(model, layer, "bias", params)
            kh, kw = kernel_size(layer.params)
            stride, padding = int(layer.params.get("stride", 1)), int(layer.params.get("padding", 0))
            if src.ndim != 4 or src.shape[1] != weight.shape[1]:
                raise ShapeMismatchError(f"{layer.id}: expected {weight.shape[1]} input channels, got {list(src.shape[1:])}")
            padded = np.pad(src, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            windows = _windows(padded, kh, kw, stride)
            out = np.einsum('bchwij,ocij->bohw', windows, weight, optimize=True)
            if bias is not None:
                out = out + bias[None, :, None, None]
            cache[layer.id] = {"windows": windows, "padded_shape": padded.shape, "padding": padding, "stride": stride}

        elif kind == LayerKind.ADD.value:
            out = acts[layer.inputs[0]].copy()
            for other in layer.inputs[1:]:
                out = out + acts[other]

        elif kind == LayerKind.RELU.value:
            out = np.maximum(src, 0.0)
            cache[layer.id] = {"mask": src > 0}

        elif kind in (LayerKind.MAXPOOL2D.value, LayerKind.AVGPOOL2D.value):
            window, stride = pool_window(layer.params)
            windows = _windows(src, window, window, stride)
            flat = windows.reshape(windows.shape[:4] + (window * window,))
            if kind == LayerKind.MAXPOOL2D.value:
                winner = flat.argmax(axis=-1) # first max on ties
                out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]
                cache[layer.id] = {"winner": winner, "shape": src.shape, "window": window, "stride": stride}
            else:
                out = flat.mean(axis=-1)
                cache[layer.id] = {"shape": src.shape, "window": window, "stride": stride}

        elif kind == LayerKind.GLOBAL_AVG_POOL.value:
            out = src.mean(axis=(2, 3))
            cache[layer.id] = {"shape": src.shape}

        elif kind == LayerKind.FLATTEN.value:
            out = src.reshape(src.shape[0], -1)
            cache[layer.id] = {"shape": src.shape}

        elif kind == LayerKind.OUTPUT.value:
            out = src
            output_id = layer.id

        else:
            raise ShapeMismatchError(f"{layer.id}: the executor cannot run layer kind '{kind}'")
        acts[layer.id] = out

    cache["__acts__"] = acts
    return acts[output_id], cache


def backward(model: ModelGraph, cache: Cache, grad_logits: np.ndarray, params: Params = None) -> GradientStore:
    """Propagates dL/dlogits back through the cached forward pass."""
    acts = cache["__acts__"]
    order = topological_order(model)
    upstream: Dict[str, np.ndarray] = {}
    grads: Dict[str, np.ndarray] = {}

    def push(layer_id: str, grad: np.ndarray):
        upstream[layer_id] = upstream[layer_id] + grad if layer_id in upstream else grad

    for layer in reversed(order):
        kind = layer.kind
        if kind == LayerKind.OUTPUT.value:
            push(layer.inputs[0], grad_logits)
            continue
        if layer.id not in upstream:
            if layer.is_prunable:
                # dead branch: nothing downstream reaches the logits
                for role in layer.weight_names:
                    grads[layer.tensor_key(role)] = np.zeros_like(model.tensors[layer.tensor_key(role)].data, dtype=np.float64)
            continue
        g = upstream.pop(layer.id)

        if kind == LayerKind.INPUT.value:
            continue

        elif kind == LayerKind.DENSE.value:
            x = cache[layer.id]["x"]
            weight = _tensor(model, layer, "weight", params)
            grads[layer.tensor_key("weight")] = g.T @ x
            if model.has_tensor(layer, "bias"):
                grads[layer.tensor_key("bias")] = g.sum(axis=0)
            push(layer.inputs[0], g @ weight)

        elif kind == LayerKind.CONV2D.value:
            entry = cache[layer.id]
            weight = _tensor(model, layer, "weight", params)
            grads[layer.tensor_key("weight")] = np.einsum('bchwij,bohw->ocij', entry["windows"], g, optimize=True)
            if model.has_tensor(layer, "bias"):
                grads[layer.tensor_key("bias")] = g.sum(axis=(0, 2, 3))
            grad_windows = np.einsum('bohw,ocij->bchwij', g, weight, optimize=True)
            padded = _scatter_windows(grad_windows, entry["padded_shape"], entry["stride"])
            p = entry["padding"]
            push(layer.inputs[0], padded[:, :, p:padded.shape[2] - p, p:padded.shape[3] - p] if p else padded)

        elif kind == LayerKind.ADD.value:
            for source in layer.inputs:
                push(source, g)

        elif kind == LayerKind.RELU.value:
            push(layer.inputs[0], g * cache[layer.id]["mask"])

        elif kind == LayerKind.MAXPOOL2D.value:
            entry = cache[layer.id]
            window = entry["window"]
            onehot = np.arange(window * window) == entry["winner"][..., None]
            grad_windows = (g[..., None] * onehot).reshape(g.shape + (window, window))
            push(layer.inputs[0], _scatter_windows(grad_windows, entry["shape"], entry["stride"]))

        elif kind == LayerKind.AVGPOOL2D.value:
            entry = cache[layer.id]
            window = entry["window"]
            grad_windows = np.broadcast_to((g / (window * window))[..., None, None], g.shape + (window, window))
            push(layer.inputs[0], _scatter_windows(grad_windows, entry["shape"], entry["stride"]))

        elif kind == LayerKind.GLOBAL_AVG_POOL.value:
            shape = cache[layer.id]["shape"]
            push(layer.inputs[0], np.broadcast_to(g[:, :, None, None] / (shape[2] * shape[3]), shape).copy())

        elif kind == LayerKind.FLATTEN.value:
            push(layer.inputs[0], g.reshape(cache[layer.id]["shape"]))

    return GradientStore(grads=grads)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeMismatchError(f"cross-entropy expects (N, classes) logits, got shape {list(logits.shape)}")
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatchError(f"{labels.shape[0]} labels for {n} examples")
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeMismatchError(f"labels must lie in [0, {classes})")
    top = logits.max(axis=1, keepdims=True)
    log_norm = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    loss = float(np.mean(log_norm - logits[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def loss_and_grads(model: ModelGraph, batch: Batch, params: Params = None) -> Tuple[float, GradientStore]:
    logits, cache = forward(model, batch, params)
    loss, grad_logits = cross_entropy(logits, batch.labels)
    return loss, backward(model, cache, grad_logits, params)


def sgd_step(model: ModelGraph, grads: GradientStore, lr: float) -> ModelGraph:
    """w <- w - lr * g for every tensor with a gradient. Mutates `model`; pass a training copy."""
    for name, grad in grads.items():
        spec = model.tensors.get(name)
        if spec is None or tuple(spec.shape) != tuple(np.shape(grad)):
            raise ShapeMismatchError(f"gradient '{name}' {list(np.shape(grad))} does not match the model tensor")
        spec.data = (spec.data.astype(np.float64) - lr * grad).astype(np.float32)
    return model


def predict(model: ModelGraph, inputs: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [forward(model, inputs[start:start + _EVAL_CHUNK])[0] for start in range(0, len(inputs), _EVAL_CHUNK)]
    )


def evaluate(model: ModelGraph, split: Batch) -> float:
    """Argmax accuracy; ties go to the lowest class index."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    logits = predict(model, _as_inputs(split))
    if logits.ndim != 2:
        raise ShapeMismatchError(f"accuracy needs (N, classes) logits, got shape {list(logits.shape)}")
    predictions = logits.argmax(axis=1)
    return float(np.mean(predictions == split.labels))


def init_weights(model: ModelGraph, seed: int) -> ModelGraph:
    """
    Fresh copy with every Dense/Conv2d tensor drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    """
    rng = np.random.default_rng(seed)
    initialised = model.clone()
    for layer in topological_order(initialised):
        if not layer.is_prunable:
            continue
        if layer.kind == LayerKind.DENSE.value:
            fan_in = int(layer.params["in_features"])
        else:
            kh, kw = kernel_size(layer.params)
            fan_in = int(layer.params["in_channels"]) * kh * kw
        bound = 1.0 / np.sqrt(fan_in)
        for role in layer.weight_names:
            key = layer.tensor_key(role)
            shape = initialised.tensors[key].shape
            data = rng.uniform(-bound, bound, size=shape)
            initialised.tensors[key] = TensorSpec(name=key, shape=list(shape), data=data)
    logger.debug(f"Initialised weights with seed {seed}")
    return initialised
