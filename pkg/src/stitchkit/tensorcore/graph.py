"""Layer graphs with forward evaluation and reverse-mode gradients."""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import (
    GraphStateError,
    NonFiniteError,
    ShapeMismatchError,
    ValidationError,
)
from .layers import LayerKind, LayerSpec, arity, he_initialize, layer_backward, layer_forward
from .tensor import Tensor4, as_array

logger = logging.getLogger(__name__)

# (channels, height, width); None leaves a spatial dim free (fully convolutional inputs)
InputShape = Tuple[int, Optional[int], Optional[int]]


@dataclass
class Node:
    """A named layer and the names of the nodes (or graph inputs) it reads."""

    name: str
    layer: LayerSpec
    inputs: Tuple[str, ...]


@dataclass
class Gradients:
    """Result of a backward pass."""

    params: Dict[str, np.ndarray] = field(default_factory=dict)
    inputs: Dict[str, np.ndarray] = field(default_factory=dict)


class Graph:
    """An ordered, acyclic list of layer nodes with a parameter registry.

    Nodes must be added in topological order: every input of a node is either a declared
    graph input or an earlier node. Parameters are registered as ``"<node>.weight"`` and
    ``"<node>.bias"`` in insertion order.
    """

    def __init__(self, name: str = "graph"):
        self.name = name
        self.input_shapes: "OrderedDict[str, InputShape]" = OrderedDict()
        self.nodes: List[Node] = []
        self._by_name: Dict[str, Node] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._activations: Optional[Dict[str, np.ndarray]] = None

    # -- construction -----------------------------------------------------------------

    def add_input(
        self, name: str, channels: int, height: Optional[int] = None, width: Optional[int] = None
    ) -> str:
        if name in self.input_shapes or name in self._by_name:
            raise ValidationError(f"Duplicate name '{name}' in graph '{self.name}'")
        self.input_shapes[name] = (channels, height, width)
        return name

    def add(self, name: str, layer: LayerSpec, *inputs: str) -> str:
        """Append a node reading ``inputs``; returns its name."""
        if name in self._by_name or name in self.input_shapes:
            raise ValidationError(f"Duplicate name '{name}' in graph '{self.name}'")
        low, high = arity(layer.kind)
        if len(inputs) < low or (high is not None and len(inputs) > high):
            raise ValidationError(
                f"Node '{name}' ({layer.kind.value}) takes {low}..{high or 'n'} inputs, "
                f"got {len(inputs)}"
            )
        for src in inputs:
            if src not in self._by_name and src not in self.input_shapes:
                raise ValidationError(f"Node '{name}' reads unknown input '{src}'")
        node = Node(name, layer, tuple(inputs))
        self.nodes.append(node)
        self._by_name[name] = node
        return name

    def node(self, name: str) -> Node:
        try:
            return self._by_name[name]
        except KeyError:
            raise ValidationError(f"Graph '{self.name}' has no node '{name}'") from None

    def initialize(self, rng: np.random.Generator) -> None:
        """He-initialize every parametric node in registry order."""
        for node in self.nodes:
            he_initialize(node.layer, rng)

    # -- parameters ---------------------------------------------------------------------

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        """Registry view: parameter name -> live buffer, in registry order."""
        params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for node in self.nodes:
            for key, value in node.layer.parameters().items():
                params[f"{node.name}.{key}"] = value
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        node_name, _, key = name.rpartition(".")
        layer = self.node(node_name).layer
        current = layer.parameters().get(key)
        if current is None:
            raise ValidationError(f"Unknown parameter '{name}'")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != current.shape:
            raise ShapeMismatchError(f"Parameter '{name}': shape {value.shape} != {current.shape}")
        setattr(layer, key, value.copy())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def iter_layers(self, kind: Optional[LayerKind] = None) -> Iterator[Node]:
        for node in self.nodes:
            if kind is None or node.layer.kind is kind:
                yield node

    def describe(self) -> Dict[str, object]:
        """Topology description (no parameter values)."""
        return {
            "name": self.name,
            "inputs": [
                {"name": k, "channels": c, "height": h, "width": w}
                for k, (c, h, w) in self.input_shapes.items()
            ],
            "nodes": [
                {
                    "name": n.name,
                    "kind": n.layer.kind.value,
                    "in_channels": n.layer.in_channels,
                    "out_channels": n.layer.out_channels,
                    "size": list(n.layer.size) if n.layer.size else None,
                    "inputs": list(n.inputs),
                }
                for n in self.nodes
            ],
        }

    @classmethod
    def from_description(cls, desc: Mapping[str, object]) -> "Graph":
        graph = cls(str(desc.get("name", "graph")))
        for item in desc["inputs"]:  # type: ignore[union-attr]
            graph.add_input(item["name"], item["channels"], item["height"], item["width"])
        for item in desc["nodes"]:  # type: ignore[union-attr]
            size = tuple(item["size"]) if item.get("size") else None
            layer = LayerSpec(item["kind"], item["in_channels"], item["out_channels"], size=size)
            graph.add(item["name"], layer, *item["inputs"])
        return graph


# ----------------------------------------------------------------------------- execution


def _check_node_inputs(node: Node, values: Sequence[np.ndarray]) -> None:
    layer = node.layer
    kind = layer.kind
    if kind is LayerKind.CONCAT_CHANNELS:
        channels = sum(v.shape[1] for v in values)
        if channels != layer.out_channels:
            raise ShapeMismatchError(
                f"Node '{node.name}': concatenated channels {channels} != {layer.out_channels}"
            )
    elif kind not in (LayerKind.SUM, LayerKind.MEAN) and values[0].shape[1] != layer.in_channels:
        raise ShapeMismatchError(
            f"Node '{node.name}': expected {layer.in_channels} input channels, "
            f"got {values[0].shape[1]}"
        )
    if kind in (LayerKind.ADD_SKIP, LayerKind.CONCAT_CHANNELS):
        ref = values[0].shape
        for v in values[1:]:
            if v.shape[0] != ref[0] or v.shape[2:] != ref[2:]:
                raise ShapeMismatchError(
                    f"Node '{node.name}': input shapes {[x.shape for x in values]} disagree"
                )
        if kind is LayerKind.ADD_SKIP and values[1].shape[1] != values[0].shape[1]:
            raise ShapeMismatchError(f"Node '{node.name}': add_skip channel counts differ")
    if kind is LayerKind.MAXPOOL2X2 and min(values[0].shape[2:]) < 2:
        raise ShapeMismatchError(f"Node '{node.name}': maxpool2x2 needs spatial dims >= 2")


def run_forward(graph: Graph, inputs: Mapping[str, "Tensor4 | np.ndarray"]) -> Dict[str, np.ndarray]:
    """Evaluate every node and return all activations (graph inputs included).

    Pure with respect to the graph: nothing is cached on ``graph``.
    """
    acts: Dict[str, np.ndarray] = {}
    for name, (channels, height, width) in graph.input_shapes.items():
        if name not in inputs:
            raise ShapeMismatchError(f"Graph '{graph.name}': missing input '{name}'")
        value = as_array(inputs[name])
        _, c, h, w = value.shape
        if c != channels or (height is not None and h != height) or (width is not None and w != width):
            raise ShapeMismatchError(
                f"Graph '{graph.name}': input '{name}' has shape {value.shape}, "
                f"declared ({channels}, {height}, {width})"
            )
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"Graph '{graph.name}': input '{name}' is not finite")
        acts[name] = value
    for node in graph.nodes:
        values = [acts[src] for src in node.inputs]
        _check_node_inputs(node, values)
        out = layer_forward(node.layer, values)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"Graph '{graph.name}': node '{node.name}' produced NaN/Inf")
        acts[node.name] = out
    return acts


def run_backward(
    graph: Graph,
    activations: Mapping[str, np.ndarray],
    seeds: Mapping[str, np.ndarray],
    want_params: bool = True,
) -> Gradients:
    """Propagate ``seeds`` (node name -> dLoss/dOutput) back through the graph."""
    pending: Dict[str, np.ndarray] = {}
    for name, seed in seeds.items():
        if name not in activations:
            raise GraphStateError(f"Graph '{graph.name}': no activation for seed '{name}'")
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != activations[name].shape:
            raise ShapeMismatchError(
                f"Seed for '{name}' has shape {seed.shape}, expected {activations[name].shape}"
            )
        pending[name] = seed.copy()

    result = Gradients()
    for node in reversed(graph.nodes):
        grad = pending.pop(node.name, None)
        if grad is None:
            continue
        values = [activations[src] for src in node.inputs]
        input_grads, param_grads = layer_backward(node.layer, values, grad)
        if want_params:
            for key, value in param_grads.items():
                result.params[f"{node.name}.{key}"] = value
        for src, g in zip(node.inputs, input_grads):
            if g is None:
                continue
            if src in pending:
                pending[src] = pending[src] + g
            else:
                pending[src] = g
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"Graph '{graph.name}': gradient at '{node.name}' is not finite")

    for name in graph.input_shapes:
        if name in pending:
            result.inputs[name] = pending.pop(name)
    if want_params:
        for name, param in graph.parameters().items():
            result.params.setdefault(name, np.zeros_like(param))
    return result


def forward(graph: Graph, inputs: Mapping[str, "Tensor4 | np.ndarray"]) -> Dict[str, Tensor4]:
    """Run the graph, remember the activations for ``backward`` and return every output."""
    acts = run_forward(graph, inputs)
    graph._activations = acts
    return {name: Tensor4(value) for name, value in acts.items()}


def backward(graph: Graph, loss_node: str) -> Gradients:
    """Backpropagate from a scalar node; fills ``graph.grads`` and returns all gradients."""
    if graph._activations is None:
        raise GraphStateError(f"backward called on '{graph.name}' before forward")
    value = graph._activations.get(loss_node)
    if value is None:
        raise GraphStateError(f"Graph '{graph.name}' has no node '{loss_node}'")
    if value.shape != (1, 1, 1, 1):
        raise GraphStateError(
            f"Loss node '{loss_node}' must be scalar (1, 1, 1, 1), got {value.shape}"
        )
    return backward_from(graph, {loss_node: np.ones((1, 1, 1, 1))})


def backward_from(graph: Graph, seeds: Mapping[str, np.ndarray], want_params: bool = True) -> Gradients:
    """Backpropagate arbitrary output gradients from the last ``forward``."""
    if graph._activations is None:
        raise GraphStateError(f"backward called on '{graph.name}' before forward")
    grads = run_backward(graph, graph._activations, seeds, want_params)
    if want_params:
        graph.grads = grads.params
    return grads


def grad_check(
    layer: LayerSpec,
    input: "Tensor4 | np.ndarray",
    epsilon: float = 1e-5,
    extra_inputs: Sequence["Tensor4 | np.ndarray"] = (),
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients of one layer.

    The scalar checked is ``sum(layer(x) * R)`` for a fixed seeded projection ``R``; every
    parameter entry and every entry of ``input`` is perturbed.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValidationError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    x = as_array(input).copy()
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("grad_check input is not finite")
    extras = [as_array(e) for e in extra_inputs]

    graph = Graph("grad_check")
    names = [graph.add_input("x", x.shape[1])]
    for i, extra in enumerate(extras):
        names.append(graph.add_input(f"extra{i}", extra.shape[1]))
    graph.add("layer", layer, *names)
    feeds: Dict[str, np.ndarray] = {"x": x}
    feeds.update({f"extra{i}": e for i, e in enumerate(extras)})

    acts = run_forward(graph, feeds)
    projection = np.random.default_rng(seed).standard_normal(acts["layer"].shape)

    def projected() -> float:
        return float(np.sum(run_forward(graph, feeds)["layer"] * projection))

    analytic = run_backward(graph, acts, {"layer": projection})

    def rel(a: float, d: float) -> float:
        return abs(a - d) / max(abs(a), abs(d), 1e-8)

    worst = 0.0
    buffers: List[Tuple[np.ndarray, np.ndarray]] = [(x, analytic.inputs["x"])]
    for pname, buf in graph.parameters().items():
        buffers.append((buf, analytic.params[pname]))
    for buf, grad in buffers:
        flat = buf.reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + epsilon
            up = projected()
            flat[k] = saved - epsilon
            down = projected()
            flat[k] = saved
            worst = max(worst, rel(float(gflat[k]), (up - down) / (2.0 * epsilon)))
    logger.debug("grad_check %s: max relative error %.3e", layer.kind.value, worst)
    return worst
