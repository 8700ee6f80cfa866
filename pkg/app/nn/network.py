"""
Network specification and the graph-level forward/backward passes.

A `NetworkSpec` is an ordered DAG: each node names its inputs, which must be
the special name "input" or a node listed earlier, so the listed order is a
topological order. Parameters live outside the spec in a plain nested dict
`{node_name: {"W": array, "b": array}}`.
"""
from __future__ import annotations

import functools
import hashlib
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.errors import NonFiniteValueError, ShapeMismatchError, StaleCacheError
from app.nn.layers import LAYERS, LEARNABLE, LayerKind
from app.nn.rng import Rng

logger = logging.getLogger(__name__)

INPUT = "input"

Params = dict[str, dict[str, np.ndarray]]


class LossKind(str, Enum):
    CROSS_ENTROPY = "cross-entropy"
    BCE = "pixelwise-binary-cross-entropy"
    WEIGHTED_CROSS_ENTROPY = "weighted-cross-entropy"
    MSE = "mean-squared-error"


class LayerSpec(BaseModel):
    """One layer and its kind-specific hyper-parameters."""
    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    in_channels: Optional[int] = Field(None, ge=1, description="Input channels (conv2d, transposed-conv2x2)")
    out_channels: Optional[int] = Field(None, ge=1, description="Output channels (conv2d, transposed-conv2x2)")
    in_features: Optional[int] = Field(None, ge=1, description="Flattened input size (dense)")
    out_features: Optional[int] = Field(None, ge=1, description="Output size (dense)")
    kernel_size: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(1, ge=0)
    frozen: bool = False

    @model_validator(mode="after")
    def _check_kind_params(self):
        if self.kind == LayerKind.CONV2D and self.kernel_size % 2 == 0:
            raise ValueError(f"conv2d kernels must be odd-sized, got {self.kernel_size}")
        if self.kind in (LayerKind.CONV2D, LayerKind.TCONV) and (self.in_channels is None or self.out_channels is None):
            raise ValueError(f"{self.kind.value} needs in_channels and out_channels")
        if self.kind == LayerKind.DENSE and (self.in_features is None or self.out_features is None):
            raise ValueError("dense needs in_features and out_features")
        return self

    @property
    def learnable(self) -> bool:
        return self.kind in LEARNABLE

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == LayerKind.CONV2D:
            k = self.kernel_size
            return {"W": (self.out_channels, self.in_channels, k, k), "b": (self.out_channels,)}
        if self.kind == LayerKind.TCONV:
            return {"W": (self.in_channels, self.out_channels, 2, 2), "b": (self.out_channels,)}
        if self.kind == LayerKind.DENSE:
            return {"W": (self.out_features, self.in_features), "b": (self.out_features,)}
        return {}

    def fans(self) -> tuple[int, int]:
        if self.kind == LayerKind.CONV2D:
            area = self.kernel_size * self.kernel_size
            return self.in_channels * area, self.out_channels * area
        if self.kind == LayerKind.TCONV:
            return self.in_channels * 4, self.out_channels * 4
        return self.in_features, self.out_features


# Convenience constructors, used by the network builders.
def conv(cin: int, cout: int, kernel_size: int = 3, stride: int = 1, padding: Optional[int] = None) -> LayerSpec:
    pad = kernel_size // 2 if padding is None else padding
    return LayerSpec(kind=LayerKind.CONV2D, in_channels=cin, out_channels=cout,
                     kernel_size=kernel_size, stride=stride, padding=pad)


def up(cin: int, cout: int) -> LayerSpec:
    return LayerSpec(kind=LayerKind.TCONV, in_channels=cin, out_channels=cout)


def dense(fin: int, fout: int) -> LayerSpec:
    return LayerSpec(kind=LayerKind.DENSE, in_features=fin, out_features=fout)


def simple(kind: LayerKind) -> LayerSpec:
    return LayerSpec(kind=kind)


class Node(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    layer: LayerSpec
    inputs: tuple[str, ...]


class NetworkSpec(BaseModel):
    """
    An ordered DAG of layers with a single output node and a loss.

    `input_shape` is the per-sample shape (no batch axis), e.g. (3, 64, 64).
    """
    model_config = ConfigDict(frozen=True)

    input_shape: tuple[int, ...]
    nodes: tuple[Node, ...]
    output: str
    loss: LossKind = LossKind.CROSS_ENTROPY

    @model_validator(mode="after")
    def _check_graph(self):
        seen = {INPUT}
        consumed = set()
        for node in self.nodes:
            if node.name in seen:
                raise ValueError(f"Duplicate node name: {node.name}")
            if not node.inputs:
                raise ValueError(f"Node '{node.name}' has no inputs and is unreachable from input")
            for src in node.inputs:
                if src not in seen:
                    raise ValueError(f"Node '{node.name}' reads '{src}' before it is defined")
                consumed.add(src)
            if node.layer.kind != LayerKind.CONCAT and len(node.inputs) != 1:
                raise ValueError(f"Node '{node.name}' of kind {node.layer.kind.value} takes exactly one input")
            seen.add(node.name)
        if self.output not in seen:
            raise ValueError(f"Output node '{self.output}' is not defined")
        dangling = [n.name for n in self.nodes if n.name not in consumed and n.name != self.output]
        if dangling:
            raise ValueError(f"Network must have a single output; dangling nodes: {dangling}")
        return self

    def node(self, name: str) -> Node:
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(name)

    def learnable_nodes(self) -> list[str]:
        return [n.name for n in self.nodes if n.layer.learnable]

    def with_frozen(self, frozen: set[str]) -> "NetworkSpec":
        """Returns a copy in which exactly the named nodes are frozen."""
        nodes = tuple(
            n.model_copy(update={"layer": n.layer.model_copy(update={"frozen": n.name in frozen})})
            for n in self.nodes
        )
        return self.model_copy(update={"nodes": nodes})

    def fine_tune_tail(self, k: int) -> "NetworkSpec":
        """Freezes every learnable node except the last `k`."""
        learnable = self.learnable_nodes()
        keep = set(learnable[len(learnable) - k:]) if k > 0 else set()
        return self.with_frozen(set(learnable) - keep)

    def fingerprint(self) -> str:
        return _fingerprint(self)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return infer_shapes(self)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[self.output]


@functools.lru_cache(maxsize=128)
def _fingerprint(net: NetworkSpec) -> str:
    return hashlib.sha256(net.model_dump_json().encode("utf-8")).hexdigest()


def _check_finite(node: str, value: np.ndarray, what: str) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteValueError(node, f"non-finite {what}")


def infer_shapes(net: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """Propagates per-sample shapes through the graph, naming the node at fault on mismatch."""
    shapes = {INPUT: tuple(net.input_shape)}
    for node in net.nodes:
        layer = node.layer
        ins = [shapes[s] for s in node.inputs]
        x = ins[0]
        kind = layer.kind
        if kind == LayerKind.CONV2D:
            if len(x) != 3 or x[0] != layer.in_channels:
                raise ShapeMismatchError(node.name, f"expected ({layer.in_channels}, H, W), got {x}")
            k, s, p = layer.kernel_size, layer.stride, layer.padding
            h = (x[1] + 2 * p - k) // s + 1
            w = (x[2] + 2 * p - k) // s + 1
            if h < 1 or w < 1:
                raise ShapeMismatchError(node.name, f"input {x} too small for kernel {k}")
            out = (layer.out_channels, h, w)
        elif kind == LayerKind.TCONV:
            if len(x) != 3 or x[0] != layer.in_channels:
                raise ShapeMismatchError(node.name, f"expected ({layer.in_channels}, H, W), got {x}")
            out = (layer.out_channels, 2 * x[1], 2 * x[2])
        elif kind == LayerKind.MAXPOOL:
            if len(x) != 3 or x[1] % 2 or x[2] % 2:
                raise ShapeMismatchError(node.name, f"maxpool2x2 needs even spatial extents, got {x}")
            out = (x[0], x[1] // 2, x[2] // 2)
        elif kind == LayerKind.CONCAT:
            if any(len(t) != 3 or t[1:] != x[1:] for t in ins):
                raise ShapeMismatchError(node.name, f"concat operands disagree on spatial extents: {ins}")
            out = (sum(t[0] for t in ins), x[1], x[2])
        elif kind == LayerKind.DENSE:
            if math.prod(x) != layer.in_features:
                raise ShapeMismatchError(node.name, f"expected {layer.in_features} input features, got {x}")
            out = (layer.out_features,)
        else:
            out = x
        shapes[node.name] = out
    return shapes


def init_params(net: NetworkSpec, rng: Rng) -> Params:
    """Glorot-uniform weights, zero biases, drawn in node order."""
    params: Params = {}
    for node in net.nodes:
        if not node.layer.learnable:
            continue
        shapes = node.layer.param_shapes()
        fan_in, fan_out = node.layer.fans()
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[node.name] = {
            "W": rng.uniform(shapes["W"], -limit, limit),
            "b": np.zeros(shapes["b"]),
        }
    return params


def params_digest(params: Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        for key in sorted(params[name]):
            h.update(name.encode("utf-8"))
            h.update(key.encode("utf-8"))
            h.update(np.ascontiguousarray(params[name][key]).tobytes())
    return h.hexdigest()


@dataclass
class ForwardCache:
    """Every intermediate activation and layer cache from one forward pass."""
    network: str
    digest: str
    input_shape: tuple[int, ...]
    activations: dict[str, np.ndarray] = field(default_factory=dict)
    layer_caches: dict[str, object] = field(default_factory=dict)


@dataclass
class Gradients:
    """Parameter gradients for every non-frozen learnable node, plus the input gradient when requested."""
    params: Params
    input: Optional[np.ndarray] = None


def forward(net: NetworkSpec, params: Params, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Runs a batch (N, *input_shape) through the network."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != len(net.input_shape) + 1 or tuple(x.shape[1:]) != tuple(net.input_shape):
        raise ShapeMismatchError(INPUT, f"expected (N, {', '.join(map(str, net.input_shape))}), got {x.shape}")
    _check_finite(INPUT, x, "input")
    cache = ForwardCache(network=net.fingerprint(), digest=params_digest(params), input_shape=x.shape)
    acts = cache.activations
    acts[INPUT] = x
    for node in net.nodes:
        inputs = [acts[s] for s in node.inputs]
        try:
            out, layer_cache = LAYERS[node.layer.kind].forward(node.layer, params.get(node.name, {}), inputs)
        except ValueError as e:
            raise ShapeMismatchError(node.name, str(e)) from e
        _check_finite(node.name, out, "activation")
        acts[node.name] = out
        cache.layer_caches[node.name] = layer_cache
    return acts[net.output], cache


def predict(net: NetworkSpec, params: Params, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Forward pass in chunks, discarding caches."""
    outputs = [forward(net, params, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(outputs, axis=0)


def backward(
    net: NetworkSpec,
    params: Params,
    cache: ForwardCache,
    loss_grad: np.ndarray,
    want_input_grad: bool = False,
) -> Gradients:
    """Back-propagates `loss_grad` (gradient w.r.t. the network output) through the cached pass."""
    if cache.network != net.fingerprint() or cache.digest != params_digest(params):
        raise StaleCacheError("Forward cache was produced by a different network or parameter set")

    # A node needs an output gradient only if something trainable (or the input) sits upstream of it.
    requires = {INPUT: want_input_grad}
    for node in net.nodes:
        trainable = node.layer.learnable and not node.layer.frozen
        requires[node.name] = trainable or any(requires[s] for s in node.inputs)

    grads: dict[str, np.ndarray] = {net.output: loss_grad}
    result = Gradients(params={})
    for node in reversed(net.nodes):
        g = grads.pop(node.name, None)
        if g is None or not requires[node.name]:
            continue
        need_params = node.layer.learnable and not node.layer.frozen
        input_grads, param_grads = LAYERS[node.layer.kind].backward(
            node.layer, params.get(node.name, {}), cache.layer_caches[node.name], g, need_params
        )
        if need_params:
            result.params[node.name] = param_grads
        for src, gi in zip(node.inputs, input_grads):
            if not requires[src]:
                continue
            _check_finite(node.name, gi, f"gradient towards '{src}'")
            grads[src] = grads[src] + gi if src in grads else gi
    if want_input_grad:
        result.input = grads.get(INPUT, np.zeros(cache.input_shape))
    return result
