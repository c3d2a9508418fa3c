"""Model graphs: typed layer DAGs with shape inference and the desk-scale zoo.

A model is a DAG of named nodes.  Nodes with no inputs read the batch (exactly
one such node is allowed) and exactly one node must have no consumers.  Shapes
are inferred once at construction, which also derives every trainable node's
parameter slice sizes, so a ``ParamVector`` layout is a pure function of the
graph.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from ..param_space import ParamVector, SliceInfo

NODE_KINDS = (
    "dense",
    "conv2d",
    "batch_norm",
    "relu",
    "max_pool",
    "avg_pool",
    "flatten",
    "residual_add",
)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class GraphNode:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: Mapping[str, int | str] = field(default_factory=dict)


class ModelGraph:
    """Validated layer DAG plus inferred shapes and parameter layout."""

    def __init__(self, nodes: Iterable[GraphNode], input_shape: tuple[int, ...]):
        self.nodes = tuple(nodes)
        self.input_shape = tuple(int(s) for s in input_shape)
        self._by_name = {}
        for node in self.nodes:
            if node.kind not in NODE_KINDS:
                raise GraphError(f"unknown node kind {node.kind!r}")
            if node.name in self._by_name:
                raise GraphError(f"duplicate node name {node.name!r}")
            self._by_name[node.name] = node
        for node in self.nodes:
            for src in node.inputs:
                if src not in self._by_name:
                    raise GraphError(f"{node.name!r} reads unknown node {src!r}")
        sources = [n.name for n in self.nodes if not n.inputs]
        if len(sources) != 1:
            raise GraphError(f"expected exactly one input node, found {sources}")
        consumed = {src for n in self.nodes for src in n.inputs}
        sinks = [n.name for n in self.nodes if n.name not in consumed]
        if len(sinks) != 1:
            raise GraphError(f"expected exactly one output node, found {sinks}")
        self.source = sources[0]
        self.sink = sinks[0]
        self.topo_order = self._topo_sort()
        self.shapes = self._infer_shapes()
        self._layout = self._build_layout()

    # -- structure ---------------------------------------------------------

    def node(self, name: str) -> GraphNode:
        return self._by_name[name]

    def consumers(self, name: str) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes if name in n.inputs)

    def _topo_sort(self) -> tuple[str, ...]:
        indeg = {n.name: len(n.inputs) for n in self.nodes}
        ready = sorted(name for name, d in indeg.items() if d == 0)
        order = []
        while ready:
            name = ready.pop(0)
            order.append(name)
            for consumer in self.consumers(name):
                indeg[consumer] -= 1
                if indeg[consumer] == 0:
                    # insertion keeps the ready list sorted for determinism
                    lo = 0
                    while lo < len(ready) and ready[lo] < consumer:
                        lo += 1
                    ready.insert(lo, consumer)
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return tuple(order)

    # -- shapes and parameters ----------------------------------------------

    def _infer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for name in self.topo_order:
            node = self._by_name[name]
            ins = [shapes[s] for s in node.inputs]
            if not node.inputs:
                ins = [self.input_shape]
            shapes[name] = _node_output_shape(node, ins)
        return shapes

    def input_shape_of(self, name: str) -> tuple[int, ...]:
        node = self._by_name[name]
        if not node.inputs:
            return self.input_shape
        return self.shapes[node.inputs[0]]

    def param_shapes(self, name: str) -> dict[str, tuple[int, ...]]:
        """Map of slice name -> array shape for one node (empty if untrainable)."""
        node = self._by_name[name]
        in_shape = self.input_shape_of(name)
        if node.kind == "dense":
            fan_in = int(np.prod(in_shape))
            out = int(node.attrs["out"])
            return {f"{name}.weight": (fan_in, out), f"{name}.bias": (out,)}
        if node.kind == "conv2d":
            in_c = in_shape[0]
            out_c = int(node.attrs["out_channels"])
            k = int(node.attrs["kernel"])
            shapes = {f"{name}.weight": (out_c, in_c, k, k)}
            if int(node.attrs.get("bias", 1)):
                # convs feeding batch_norm drop the bias: the normalization
                # re-centers channels, leaving such a bias with zero gradient
                shapes[f"{name}.bias"] = (out_c,)
            return shapes
        if node.kind == "batch_norm":
            c = in_shape[0] if len(in_shape) > 1 else in_shape[0]
            return {f"{name}.scale": (c,), f"{name}.shift": (c,)}
        return {}

    def _build_layout(self) -> tuple[SliceInfo, ...]:
        layout = []
        offset = 0
        for name in self.topo_order:
            node = self._by_name[name]
            for slice_name, shape in self.param_shapes(name).items():
                kind = _slice_kind(node.kind, slice_name)
                length = int(np.prod(shape))
                layout.append(SliceInfo(slice_name, offset, length, kind))
                offset += length
        if not layout:
            raise GraphError("graph has no trainable parameters")
        return tuple(layout)

    @property
    def layout(self) -> tuple[SliceInfo, ...]:
        return self._layout

    @property
    def num_params(self) -> int:
        last = self._layout[-1]
        return last.offset + last.length

    def slice_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self._layout)

    def slice_shape(self, slice_name: str) -> tuple[int, ...]:
        node_name = slice_name.rsplit(".", 1)[0]
        return self.param_shapes(node_name)[slice_name]

    def wrap(self, data: np.ndarray) -> ParamVector:
        return ParamVector(data, self._layout)

    def has_norm_layers(self) -> bool:
        return any(n.kind == "batch_norm" for n in self.nodes)

    def digest(self) -> bytes:
        """Stable 32-byte digest of the architecture (names, kinds, shapes)."""
        desc = {
            "input_shape": list(self.input_shape),
            "nodes": [
                {
                    "name": n.name,
                    "kind": n.kind,
                    "inputs": list(n.inputs),
                    "attrs": {k: n.attrs[k] for k in sorted(n.attrs)},
                }
                for n in self.nodes
            ],
        }
        blob = json.dumps(desc, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).digest()


def _slice_kind(node_kind: str, slice_name: str) -> str:
    leaf = slice_name.rsplit(".", 1)[1]
    if node_kind == "batch_norm":
        return "norm_scale" if leaf == "scale" else "norm_shift"
    return "weight" if leaf == "weight" else "bias"


def _node_output_shape(node: GraphNode, ins: list[tuple[int, ...]]) -> tuple[int, ...]:
    kind = node.kind
    if kind == "dense":
        return (int(node.attrs["out"]),)
    if kind == "conv2d":
        c, h, w = ins[0]
        out_c = int(node.attrs["out_channels"])
        k = int(node.attrs["kernel"])
        stride = int(node.attrs.get("stride", 1))
        pad = int(node.attrs.get("pad", 0))
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        if oh < 1 or ow < 1:
            raise GraphError(f"{node.name!r}: kernel does not fit input {ins[0]}")
        return (out_c, oh, ow)
    if kind in ("batch_norm", "relu"):
        return ins[0]
    if kind == "max_pool" or kind == "avg_pool":
        if node.attrs.get("mode") == "global":
            c, h, w = ins[0]
            return (c, 1, 1)
        k = int(node.attrs["kernel"])
        c, h, w = ins[0]
        if h % k or w % k:
            raise GraphError(f"{node.name!r}: input {ins[0]} not divisible by {k}")
        return (c, h // k, w // k)
    if kind == "flatten":
        return (int(np.prod(ins[0])),)
    if kind == "residual_add":
        if len(ins) != 2:
            raise GraphError(f"{node.name!r}: residual_add needs two inputs")
        if ins[0] != ins[1]:
            raise GraphError(f"{node.name!r}: branch shapes differ: {ins}")
        return ins[0]
    raise GraphError(f"unknown node kind {kind!r}")


# -- desk-scale zoo ----------------------------------------------------------


def mlp2(in_dim: int = 20, hidden: int = 16, classes: int = 3) -> ModelGraph:
    """Two dense layers with a relu between: the smallest usable classifier."""
    nodes = [
        GraphNode("fc1", "dense", (), {"out": hidden}),
        GraphNode("act1", "relu", ("fc1",)),
        GraphNode("fc2", "dense", ("act1",), {"out": classes}),
    ]
    return ModelGraph(nodes, (in_dim,))


def lenet_micro(in_channels: int = 1, hw: int = 28, classes: int = 10) -> ModelGraph:
    """Two conv+pool stages and a two-layer dense head."""
    nodes = [
        GraphNode("conv1", "conv2d", (), {"out_channels": 4, "kernel": 3, "pad": 1}),
        GraphNode("act1", "relu", ("conv1",)),
        GraphNode("pool1", "max_pool", ("act1",), {"kernel": 2}),
        GraphNode("conv2", "conv2d", ("pool1",), {"out_channels": 8, "kernel": 3, "pad": 1}),
        GraphNode("act2", "relu", ("conv2",)),
        GraphNode("pool2", "max_pool", ("act2",), {"kernel": 2}),
        GraphNode("flat", "flatten", ("pool2",)),
        GraphNode("fc1", "dense", ("flat",), {"out": 32}),
        GraphNode("act3", "relu", ("fc1",)),
        GraphNode("fc2", "dense", ("act3",), {"out": classes}),
    ]
    return ModelGraph(nodes, (in_channels, hw, hw))


def resnet_micro(in_channels: int = 1, hw: int = 28, classes: int = 10, width: int = 8) -> ModelGraph:
    """Conv stem, one identity residual block, one projection residual block.

    The projection block gives the graph a parameterized parallel branch,
    which is what the data-flow phase ordering needs to exercise.
    """
    w2 = width * 2
    nodes = [
        GraphNode("stem.conv", "conv2d", (), {"out_channels": width, "kernel": 3, "pad": 1, "bias": 0}),
        GraphNode("stem.bn", "batch_norm", ("stem.conv",)),
        GraphNode("stem.act", "relu", ("stem.bn",)),
        # identity-skip block
        GraphNode("block1.conv_a", "conv2d", ("stem.act",), {"out_channels": width, "kernel": 3, "pad": 1, "bias": 0}),
        GraphNode("block1.bn_a", "batch_norm", ("block1.conv_a",)),
        GraphNode("block1.act_a", "relu", ("block1.bn_a",)),
        GraphNode("block1.conv_b", "conv2d", ("block1.act_a",), {"out_channels": width, "kernel": 3, "pad": 1, "bias": 0}),
        GraphNode("block1.bn_b", "batch_norm", ("block1.conv_b",)),
        GraphNode("block1.add", "residual_add", ("stem.act", "block1.bn_b")),
        GraphNode("block1.act_out", "relu", ("block1.add",)),
        # projection-skip block (downsamples)
        GraphNode("block2.conv_a", "conv2d", ("block1.act_out",), {"out_channels": w2, "kernel": 3, "stride": 2, "pad": 1, "bias": 0}),
        GraphNode("block2.bn_a", "batch_norm", ("block2.conv_a",)),
        GraphNode("block2.act_a", "relu", ("block2.bn_a",)),
        GraphNode("block2.conv_b", "conv2d", ("block2.act_a",), {"out_channels": w2, "kernel": 3, "pad": 1, "bias": 0}),
        GraphNode("block2.bn_b", "batch_norm", ("block2.conv_b",)),
        GraphNode("block2.skip_conv", "conv2d", ("block1.act_out",), {"out_channels": w2, "kernel": 1, "stride": 2, "bias": 0}),
        GraphNode("block2.skip_bn", "batch_norm", ("block2.skip_conv",)),
        GraphNode("block2.add", "residual_add", ("block2.bn_b", "block2.skip_bn")),
        GraphNode("block2.act_out", "relu", ("block2.add",)),
        # head
        GraphNode("head.pool", "avg_pool", ("block2.act_out",), {"mode": "global"}),
        GraphNode("head.flat", "flatten", ("head.pool",)),
        GraphNode("head.fc", "dense", ("head.flat",), {"out": classes}),
    ]
    return ModelGraph(nodes, (in_channels, hw, hw))


MODEL_BUILDERS = {
    "mlp2": mlp2,
    "lenet-micro": lenet_micro,
    "resnet-micro": resnet_micro,
}


def build_model(name: str, **kwargs) -> ModelGraph:
    try:
        builder = MODEL_BUILDERS[name]
    except KeyError:
        raise GraphError(f"unknown model {name!r}; choices: {sorted(MODEL_BUILDERS)}")
    return builder(**kwargs)
