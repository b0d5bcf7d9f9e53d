from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.models.graph_models import Layer, LayerKind, ModelGraph, TensorSpec
from src.tools.executor import init_weights


class GraphBuilder:
    """
    Small fluent helper for assembling model graphs. Tracks every layer's output shape
    so Dense/Conv2d layers only need their output width.
    """
    def __init__(self):
        self.layers: List[Layer] = []
        self.tensors: Dict[str, TensorSpec] = {}
        self.shapes: Dict[str, Tuple[int, ...]] = {}

    def _add(self, layer: Layer, shape: Tuple[int, ...]) -> str:
        self.layers.append(layer)
        self.shapes[layer.id] = shape
        return layer.id

    def _zeros(self, layer: Layer, role: str, shape: Tuple[int, ...]) -> None:
        key = layer.tensor_key(role)
        self.tensors[key] = TensorSpec(name=key, shape=list(shape), data=np.zeros(shape, dtype=np.float32))

    def input(self, shape: Sequence[int], layer_id: str = "input") -> str:
        shape = tuple(int(v) for v in shape)
        return self._add(Layer(id=layer_id, kind=LayerKind.INPUT.value, params={"shape": list(shape)}), shape)

    def dense(self, layer_id: str, source: str, out_features: int, bias: bool = True) -> str:
        in_features = self.shapes[source][0]
        layer = Layer(
            id=layer_id, kind=LayerKind.DENSE.value, inputs=[source],
            params={"in_features": in_features, "out_features": out_features},
            weight_names=["weight", "bias"] if bias else ["weight"],
        )
        self._zeros(layer, "weight", (out_features, in_features))
        if bias:
            self._zeros(layer, "bias", (out_features,))
        return self._add(layer, (out_features,))

    def conv(self, layer_id: str, source: str, out_channels: int, kernel: int = 3, stride: int = 1,
             padding: Optional[int] = None, bias: bool = True) -> str:
        c_in, h, w = self.shapes[source]
        padding = kernel // 2 if padding is None else padding
        layer = Layer(
            id=layer_id, kind=LayerKind.CONV2D.value, inputs=[source],
            params={"in_channels": c_in, "out_channels": out_channels, "kernel": [kernel, kernel],
                    "stride": stride, "padding": padding},
            weight_names=["weight", "bias"] if bias else ["weight"],
        )
        self._zeros(layer, "weight", (out_channels, c_in, kernel, kernel))
        if bias:
            self._zeros(layer, "bias", (out_channels,))
        h_out = (h + 2 * padding - kernel) // stride + 1
        w_out = (w + 2 * padding - kernel) // stride + 1
        return self._add(layer, (out_channels, h_out, w_out))

    def relu(self, layer_id: str, source: str) -> str:
        return self._add(Layer(id=layer_id, kind=LayerKind.RELU.value, inputs=[source]), self.shapes[source])

    def add(self, layer_id: str, *sources: str) -> str:
        return self._add(Layer(id=layer_id, kind=LayerKind.ADD.value, inputs=list(sources)), self.shapes[sources[0]])

    def pool(self, layer_id: str, source: str, kind: LayerKind = LayerKind.MAXPOOL2D, window: int = 2,
             stride: Optional[int] = None) -> str:
        stride = stride or window
        c, h, w = self.shapes[source]
        layer = Layer(id=layer_id, kind=kind.value, inputs=[source], params={"window": window, "stride": stride})
        return self._add(layer, (c, (h - window) // stride + 1, (w - window) // stride + 1))

    def global_pool(self, layer_id: str, source: str) -> str:
        layer = Layer(id=layer_id, kind=LayerKind.GLOBAL_AVG_POOL.value, inputs=[source])
        return self._add(layer, (self.shapes[source][0],))

    def flatten(self, layer_id: str, source: str) -> str:
        layer = Layer(id=layer_id, kind=LayerKind.FLATTEN.value, inputs=[source])
        return self._add(layer, (int(np.prod(self.shapes[source])),))

    def output(self, source: str, layer_id: str = "output") -> str:
        return self._add(Layer(id=layer_id, kind=LayerKind.OUTPUT.value, inputs=[source]), self.shapes[source])

    def build(self, seed: Optional[int] = 0, name: str = "") -> ModelGraph:
        model = ModelGraph(layers=list(self.layers), tensors=dict(self.tensors), metadata={"name": name} if name else {})
        return init_weights(model, seed) if seed is not None else model


def dense_chain(widths: Sequence[int], relu_after: Optional[Iterable[int]] = None, bias: bool = True,
                seed: Optional[int] = 0) -> ModelGraph:
    """
    Input(widths[0]) -> Dense -> ... -> Dense(widths[-1]) -> Output. `relu_after` lists the
    (0-based) dense layers followed by a ReLU; by default every hidden one.
    """
    relu_after = set(range(len(widths) - 2) if relu_after is None else relu_after)
    g = GraphBuilder()
    x = g.input([widths[0]])
    for i, width in enumerate(widths[1:]):
        x = g.dense(f"fc{i + 1}", x, width, bias=bias)
        if i in relu_after:
            x = g.relu(f"relu{i + 1}", x)
    g.output(x)
    return g.build(seed, name=f"dense_chain_{'_'.join(map(str, widths))}")


def mlp(n_features: int, hidden: Sequence[int], n_classes: int, seed: Optional[int] = 0) -> ModelGraph:
    return dense_chain([n_features, *hidden, n_classes], seed=seed)


def resnet_block(in_channels: int = 8, mid_channels: int = 8, out_channels: int = 8, size: int = 6,
                 projection: bool = True, n_classes: Optional[int] = None, seed: Optional[int] = 0) -> ModelGraph:
    """
    Basic residual block: conv3x3 -> ReLU -> conv3x3 plus a shortcut (1x1 projection conv or
    identity), summed and rectified. With `n_classes` a pooled dense classifier follows.
    """
    if not projection and in_channels != out_channels:
        raise ValueError("an identity shortcut needs in_channels == out_channels")
    g = GraphBuilder()
    x = g.input([in_channels, size, size])
    y = g.relu("relu1", g.conv("conv1", x, mid_channels))
    y = g.conv("conv2", y, out_channels)
    shortcut = g.conv("proj", x, out_channels, kernel=1, padding=0) if projection else x
    out = g.relu("relu2", g.add("add", y, shortcut))
    if n_classes is not None:
        out = g.dense("fc", g.global_pool("gap", out), n_classes)
    g.output(out)
    return g.build(seed, name="resnet_block_" + ("projection" if projection else "identity"))


def two_branch_add(n_features: int = 6, width: int = 8, branch: int = 8, n_classes: int = 3,
                   seed: Optional[int] = 0) -> ModelGraph:
    """Dense stem feeding two dense branches merged by Add, then a dense classifier."""
    g = GraphBuilder()
    x = g.relu("relu0", g.dense("stem", g.input([n_features]), width))
    merged = g.add("add", g.dense("branch_a", x, branch), g.dense("branch_b", x, branch))
    g.output(g.dense("head", g.relu("relu1", merged), n_classes))
    return g.build(seed, name="two_branch_add")


def conv_net(in_shape: Sequence[int] = (2, 6, 6), channels: Sequence[int] = (4, 6), n_classes: int = 3,
             pool: LayerKind = LayerKind.MAXPOOL2D, flatten: bool = False, seed: Optional[int] = 0) -> ModelGraph:
    """
    Conv -> ReLU -> pool -> Conv -> ReLU -> (GlobalAvgPool | full-window AvgPool + Flatten) -> Dense.
    """
    g = GraphBuilder()
    x = g.input(in_shape)
    x = g.relu("relu1", g.conv("conv1", x, channels[0]))
    x = g.pool("pool1", x, kind=pool, window=2)
    x = g.relu("relu2", g.conv("conv2", x, channels[1]))
    if flatten:
        x = g.flatten("flatten", g.pool("pool2", x, kind=LayerKind.AVGPOOL2D, window=g.shapes[x][1]))
    else:
        x = g.global_pool("gap", x)
    g.output(g.dense("fc", x, n_classes))
    return g.build(seed, name="conv_net")


ZOO = {
    "dense_chain": lambda seed: dense_chain([4, 8, 6, 3], relu_after=[0], seed=seed),
    "mlp": lambda seed: mlp(16, [32, 32, 32], 4, seed=seed),
    "resnet_projection": lambda seed: resnet_block(projection=True, seed=seed),
    "resnet_identity": lambda seed: resnet_block(projection=False, seed=seed),
    "resnet_classifier": lambda seed: resnet_block(in_channels=3, mid_channels=16, out_channels=16, size=8,
                                                   n_classes=4, seed=seed),
    "two_branch": lambda seed: two_branch_add(seed=seed),
    "conv_net": lambda seed: conv_net(seed=seed),
}
