"""Layer-graph model definitions and the graph executor.

A :class:`ModelSpec` is an immutable, JSON-serializable description of a CNN:
an ordered list of nodes (already topologically sorted) whose ``inputs`` refer
to earlier nodes.  Parameters live in a separate store keyed by node name, so
the same spec drives initialization, forward/backward execution, parameter
counting and shape tracing.

Three builders are provided: ``resnet50`` (bottleneck residual stages),
``densenet121`` (dense blocks with pre-activation composites) and
``modified_vgg16`` (width-halved VGG-16 with a global-average-pool head).
``width_scale`` multiplies every channel count, rounding to the nearest
integer with a floor of 1.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .layers import ShapeError


@dataclass(frozen=True)
class LayerNode:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    trace: str | None = None


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    width_scale: float
    nodes: tuple[LayerNode, ...]


PARAM_KINDS = ("conv2d", "batchnorm", "dense")


def _scaled(channels: int, width_scale: float) -> int:
    return max(1, int(math.floor(channels * width_scale + 0.5)))


class _Graph:
    """Accumulates nodes with unique names while a builder runs."""

    def __init__(self, input_shape):
        self.nodes: list[LayerNode] = []
        self._names: set[str] = set()
        self.add_node("input", "input", shape=tuple(input_shape))

    def add_node(self, name, kind, inputs=(), trace=None, **attrs) -> str:
        if name in self._names:
            raise ValueError(f"duplicate node name {name!r}")
        self._names.add(name)
        self.nodes.append(LayerNode(name, kind, tuple(inputs), attrs, trace))
        return name

    def conv(self, src, name, out_channels, kernel, stride=1, padding="same",
             bias=True, trace=None):
        return self.add_node(name, "conv2d", (src,), trace=trace,
                             out_channels=out_channels, kernel=kernel,
                             stride=stride, padding=padding, bias=bias)

    def bn(self, src, name, trace=None):
        return self.add_node(name, "batchnorm", (src,), trace=trace,
                             eps=layers.BN_EPS, momentum=layers.BN_MOMENTUM)

    def relu(self, src, name, trace=None):
        return self.add_node(name, "relu", (src,), trace=trace)

    def maxpool(self, src, name, window, stride, padding=0, trace=None):
        return self.add_node(name, "maxpool2d", (src,), trace=trace,
                             window=window, stride=stride, padding=padding)

    def avgpool(self, src, name, window, stride, trace=None):
        return self.add_node(name, "avgpool2d", (src,), trace=trace,
                             window=window, stride=stride)

    def global_avgpool(self, src, name, trace=None):
        return self.add_node(name, "globalavgpool", (src,), trace=trace)

    def dense(self, src, name, units, trace=None):
        return self.add_node(name, "dense", (src,), trace=trace, units=units)

    def add(self, a, b, name, trace=None):
        return self.add_node(name, "add", (a, b), trace=trace)

    def concat(self, srcs, name, trace=None):
        return self.add_node(name, "concat", tuple(srcs), trace=trace)


def _check_input_shape(input_shape) -> tuple[int, int, int]:
    h, w, c = input_shape
    if h % 32 or w % 32:
        raise ShapeError(f"input spatial dims must be divisible by 32, got {h}x{w}")
    if c < 1:
        raise ShapeError(f"input needs at least one channel, got {c}")
    return (h, w, c)


def build_resnet50(input_shape, num_classes: int, width_scale: float = 1.0) -> ModelSpec:
    """Bottleneck residual network: 7x7/2 stem, 3x3/2 max pool, four stages of
    1x1-3x3-1x1 bottlenecks (x4 expansion) repeated (3, 4, 6, 3), projection
    shortcut at each stage entry, global-average-pool head."""
    input_shape = _check_input_shape(input_shape)
    g = _Graph(input_shape)
    x = g.conv("input", "conv1", _scaled(64, width_scale), 7, stride=2, padding=3,
               trace="conv1")
    x = g.bn(x, "conv1_bn")
    x = g.relu(x, "conv1_relu")
    x = g.maxpool(x, "pool1", 3, 2, padding=1)
    for si, (width, repeats) in enumerate(zip((64, 128, 256, 512), (3, 4, 6, 3))):
        w = _scaled(width, width_scale)
        out = 4 * w
        for b in range(repeats):
            p = f"stage{si + 1}_block{b + 1}"
            stride = 2 if (b == 0 and si > 0) else 1
            y = g.conv(x, f"{p}_conv1", w, 1, stride=stride, padding=0)
            y = g.bn(y, f"{p}_bn1")
            y = g.relu(y, f"{p}_relu1")
            y = g.conv(y, f"{p}_conv2", w, 3, padding="same")
            y = g.bn(y, f"{p}_bn2")
            y = g.relu(y, f"{p}_relu2")
            y = g.conv(y, f"{p}_conv3", out, 1, padding=0)
            y = g.bn(y, f"{p}_bn3")
            if b == 0:
                shortcut = g.conv(x, f"{p}_proj", out, 1, stride=stride, padding=0)
                shortcut = g.bn(shortcut, f"{p}_proj_bn")
            else:
                shortcut = x
            x = g.add(y, shortcut, f"{p}_add")
            trace = f"conv{si + 2}_x" if b == repeats - 1 else None
            x = g.relu(x, f"{p}_out", trace=trace)
    x = g.global_avgpool(x, "head_pool", trace="head")
    g.dense(x, "head_dense", num_classes)
    return ModelSpec("resnet50", input_shape, num_classes, width_scale, tuple(g.nodes))


def build_densenet121(input_shape, num_classes: int, width_scale: float = 1.0) -> ModelSpec:
    """Densely connected network: growth rate 32, block repeats (6, 12, 24, 16),
    pre-activation composites (1x1 to 4x growth, then 3x3 to growth, concat),
    transitions that halve channels through a 1x1 conv and 2x2/2 average pool."""
    input_shape = _check_input_shape(input_shape)
    growth = _scaled(32, width_scale)
    g = _Graph(input_shape)
    x = g.conv("input", "stem_conv", _scaled(64, width_scale), 7, stride=2, padding=3,
               bias=False, trace="convolution")
    x = g.bn(x, "stem_bn")
    x = g.relu(x, "stem_relu")
    x = g.maxpool(x, "stem_pool", 3, 2, padding=1, trace="pooling")
    channels = _scaled(64, width_scale)
    for bi, repeats in enumerate((6, 12, 24, 16)):
        for li in range(repeats):
            p = f"block{bi + 1}_layer{li + 1}"
            y = g.bn(x, f"{p}_bn1")
            y = g.relu(y, f"{p}_relu1")
            y = g.conv(y, f"{p}_conv1", 4 * growth, 1, padding=0, bias=False)
            y = g.bn(y, f"{p}_bn2")
            y = g.relu(y, f"{p}_relu2")
            y = g.conv(y, f"{p}_conv2", growth, 3, padding="same", bias=False)
            trace = f"dense_block_{bi + 1}" if li == repeats - 1 else None
            x = g.concat((x, y), f"{p}_concat", trace=trace)
            channels += growth
        if bi < 3:
            p = f"transition{bi + 1}"
            y = g.bn(x, f"{p}_bn")
            y = g.relu(y, f"{p}_relu")
            y = g.conv(y, f"{p}_conv", channels // 2, 1, padding=0, bias=False,
                       trace=f"transition_{bi + 1}_conv")
            x = g.avgpool(y, f"{p}_pool", 2, 2, trace=f"transition_{bi + 1}_pool")
            channels //= 2
    x = g.bn(x, "final_bn")
    x = g.relu(x, "final_relu")
    x = g.global_avgpool(x, "head_pool", trace="classification")
    g.dense(x, "head_dense", num_classes)
    return ModelSpec("densenet121", input_shape, num_classes, width_scale, tuple(g.nodes))


def build_modified_vgg16(input_shape, num_classes: int, width_scale: float = 1.0) -> ModelSpec:
    """VGG-16 layout with every stage width halved (32, 64, 128, 256, 256),
    no batch normalization, and the fully-connected stack replaced by a
    global-average-pool plus a single dense classifier."""
    input_shape = _check_input_shape(input_shape)
    g = _Graph(input_shape)
    x = "input"
    for bi, (width, repeats) in enumerate(zip((32, 64, 128, 256, 256), (2, 2, 3, 3, 3))):
        w = _scaled(width, width_scale)
        for ci in range(repeats):
            x = g.conv(x, f"block{bi + 1}_conv{ci + 1}", w, 3, padding="same")
            x = g.relu(x, f"block{bi + 1}_relu{ci + 1}")
        x = g.maxpool(x, f"block{bi + 1}_pool", 2, 2, trace=f"block{bi + 1}")
    x = g.global_avgpool(x, "head_pool", trace="head")
    g.dense(x, "head_dense", num_classes)
    return ModelSpec("modified_vgg16", input_shape, num_classes, width_scale, tuple(g.nodes))


ARCHITECTURES = {
    "modified_vgg16": build_modified_vgg16,
    "resnet50": build_resnet50,
    "densenet121": build_densenet121,
}


def build_model(name: str, input_shape, num_classes: int, width_scale: float = 1.0) -> ModelSpec:
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
    if not (0 < width_scale <= 1):
        raise ValueError(f"width_scale must lie in (0, 1], got {width_scale}")
    return ARCHITECTURES[name](tuple(input_shape), num_classes, width_scale)


def _node_output_shape(node: LayerNode, in_shapes: list[tuple]) -> tuple:
    kind = node.kind
    if kind == "input":
        return tuple(node.attrs["shape"])
    if kind == "conv2d":
        h, w, _ = in_shapes[0]
        k = node.attrs["kernel"]
        ph, pw = layers._pad_pair(node.attrs["padding"], k, k)
        s = node.attrs["stride"]
        return (layers._out_dim(h, k, ph, s), layers._out_dim(w, k, pw, s),
                node.attrs["out_channels"])
    if kind in ("batchnorm", "relu"):
        return in_shapes[0]
    if kind == "maxpool2d":
        h, w, c = in_shapes[0]
        k, s, p = node.attrs["window"], node.attrs["stride"], node.attrs["padding"]
        return (layers._out_dim(h, k, p, s), layers._out_dim(w, k, p, s), c)
    if kind == "avgpool2d":
        h, w, c = in_shapes[0]
        k, s = node.attrs["window"], node.attrs["stride"]
        return (layers._out_dim(h, k, 0, s), layers._out_dim(w, k, 0, s), c)
    if kind == "globalavgpool":
        return (1, 1, in_shapes[0][2])
    if kind == "dense":
        return (node.attrs["units"],)
    if kind == "add":
        a, b = in_shapes
        if a != b:
            raise ShapeError(f"add node {node.name!r} joins mismatched shapes {a} and {b}")
        return a
    if kind == "concat":
        h, w, _ = in_shapes[0]
        for s in in_shapes[1:]:
            if s[:2] != (h, w):
                raise ShapeError(
                    f"concat node {node.name!r} joins mismatched spatial dims "
                    f"{in_shapes[0]} and {s}"
                )
        return (h, w, sum(s[2] for s in in_shapes))
    raise ValueError(f"unknown node kind {kind!r}")


def propagate_shapes(spec: ModelSpec) -> dict[str, tuple]:
    """Per-node output shapes (sample dims only, no batch axis)."""
    shapes: dict[str, tuple] = {}
    for node in spec.nodes:
        missing = [i for i in node.inputs if i not in shapes]
        if missing:
            raise ValueError(f"node {node.name!r} consumes undefined inputs {missing}")
        shapes[node.name] = _node_output_shape(node, [shapes[i] for i in node.inputs])
    return shapes


def validate_spec(spec: ModelSpec) -> None:
    """Structural invariants: one input, one output, edges point backwards."""
    if not spec.nodes or spec.nodes[0].kind != "input":
        raise ValueError("spec must start with a single input node")
    if sum(1 for n in spec.nodes if n.kind == "input") != 1:
        raise ValueError("spec must contain exactly one input node")
    consumed = {name for n in spec.nodes for name in n.inputs}
    sinks = [n.name for n in spec.nodes if n.name not in consumed]
    if len(sinks) != 1:
        raise ValueError(f"spec must have exactly one output node, found {sinks}")
    propagate_shapes(spec)


def trace_shapes(spec: ModelSpec) -> list[tuple[str, tuple]]:
    """Ordered (stage label, output shape) pairs for every trace-marked node."""
    shapes = propagate_shapes(spec)
    return [(n.trace, shapes[n.name]) for n in spec.nodes if n.trace]


def count_parameters(spec: ModelSpec) -> int:
    """Every trainable and running-statistic scalar, counted exactly once."""
    shapes = propagate_shapes(spec)
    total = 0
    for node in spec.nodes:
        if node.kind == "conv2d":
            cin = shapes[node.inputs[0]][2]
            k = node.attrs["kernel"]
            cout = node.attrs["out_channels"]
            total += k * k * cin * cout + (cout if node.attrs["bias"] else 0)
        elif node.kind == "batchnorm":
            total += 4 * shapes[node.inputs[0]][2]
        elif node.kind == "dense":
            din = int(np.prod(shapes[node.inputs[0]]))
            total += din * node.attrs["units"] + node.attrs["units"]
    return total


def param_shapes(spec: ModelSpec) -> dict[str, dict[str, tuple[int, ...]]]:
    """Expected array shape for every parameter, keyed like the param store."""
    shapes = propagate_shapes(spec)
    out: dict[str, dict[str, tuple[int, ...]]] = {}
    for node in spec.nodes:
        if node.kind == "conv2d":
            cin = shapes[node.inputs[0]][2]
            k = node.attrs["kernel"]
            cout = node.attrs["out_channels"]
            entry = {"weights": (k, k, cin, cout)}
            if node.attrs["bias"]:
                entry["bias"] = (cout,)
            out[node.name] = entry
        elif node.kind == "batchnorm":
            c = shapes[node.inputs[0]][2]
            out[node.name] = {"gamma": (c,), "beta": (c,),
                              "running_mean": (c,), "running_var": (c,)}
        elif node.kind == "dense":
            din = int(np.prod(shapes[node.inputs[0]]))
            units = node.attrs["units"]
            out[node.name] = {"weights": (din, units), "bias": (units,)}
    return out


def init_params(spec: ModelSpec, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, dict[str, np.ndarray]]:
    """He-style init: normal(0, sqrt(2/fan_in)) weights, zero biases and betas,
    unit gammas and running variances.  Draw order follows node order."""
    shapes = propagate_shapes(spec)
    params: dict[str, dict[str, np.ndarray]] = {}
    for node in spec.nodes:
        if node.kind == "conv2d":
            cin = shapes[node.inputs[0]][2]
            k = node.attrs["kernel"]
            cout = node.attrs["out_channels"]
            std = math.sqrt(2.0 / (k * k * cin))
            entry = {"weights": (rng.standard_normal((k, k, cin, cout)) * std).astype(dtype)}
            if node.attrs["bias"]:
                entry["bias"] = np.zeros(cout, dtype=dtype)
            params[node.name] = entry
        elif node.kind == "batchnorm":
            c = shapes[node.inputs[0]][2]
            params[node.name] = {
                "gamma": np.ones(c, dtype=dtype),
                "beta": np.zeros(c, dtype=dtype),
                "running_mean": np.zeros(c, dtype=dtype),
                "running_var": np.ones(c, dtype=dtype),
            }
        elif node.kind == "dense":
            din = int(np.prod(shapes[node.inputs[0]]))
            units = node.attrs["units"]
            std = math.sqrt(2.0 / din)
            params[node.name] = {
                "weights": (rng.standard_normal((din, units)) * std).astype(dtype),
                "bias": np.zeros(units, dtype=dtype),
            }
    return params


def _output_node(spec: ModelSpec) -> str:
    consumed = {name for n in spec.nodes for name in n.inputs}
    sinks = [n.name for n in spec.nodes if n.name not in consumed]
    if len(sinks) != 1:
        raise ValueError(f"spec must have exactly one output node, found {sinks}")
    return sinks[0]


def forward(spec: ModelSpec, params, batch: np.ndarray, mode: str = "infer",
            return_cache: bool = False):
    """Run the graph on an NHWC batch, returning class logits.

    ``mode='train'`` makes batch-norm nodes use batch statistics and update
    their running statistics in place.
    """
    expect = spec.input_shape
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(expect):
        raise ShapeError(
            f"batch shape {batch.shape} does not match the spec input {expect}"
        )
    acts: dict[str, np.ndarray] = {}
    caches: dict[str, object] = {}
    for node in spec.nodes:
        kind = node.kind
        src = [acts[i] for i in node.inputs]
        if kind == "input":
            y, cache = batch, None
        elif kind == "conv2d":
            p = params[node.name]
            y, cache = layers.conv2d_forward(src[0], p["weights"], p.get("bias"),
                                             node.attrs["stride"], node.attrs["padding"])
        elif kind == "batchnorm":
            p = params[node.name]
            y, cache = layers.batchnorm_forward(
                src[0], p["gamma"], p["beta"], p["running_mean"], p["running_var"],
                mode, node.attrs["momentum"], node.attrs["eps"])
        elif kind == "relu":
            y, cache = layers.relu_forward(src[0])
        elif kind == "maxpool2d":
            y, cache = layers.maxpool2d_forward(src[0], node.attrs["window"],
                                                node.attrs["stride"], node.attrs["padding"])
        elif kind == "avgpool2d":
            y, cache = layers.avgpool2d_forward(src[0], node.attrs["window"],
                                                node.attrs["stride"])
        elif kind == "globalavgpool":
            y, cache = layers.global_avgpool_forward(src[0])
        elif kind == "dense":
            p = params[node.name]
            y, cache = layers.dense_forward(src[0], p["weights"], p["bias"])
        elif kind == "add":
            if src[0].shape != src[1].shape:
                raise ShapeError(f"add node {node.name!r} joins mismatched shapes "
                                 f"{src[0].shape} and {src[1].shape}")
            y, cache = src[0] + src[1], None
        elif kind == "concat":
            y = np.concatenate(src, axis=3)
            cache = [a.shape[3] for a in src]
        else:
            raise ValueError(f"unknown node kind {kind!r}")
        acts[node.name] = y
        caches[node.name] = cache
    logits = acts[_output_node(spec)]
    if return_cache:
        return logits, caches
    return logits


def backward(spec: ModelSpec, params, caches, grad_logits: np.ndarray):
    """Reverse pass over the graph.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` mirrors the
    trainable entries of the parameter store.
    """
    grads_act: dict[str, np.ndarray] = {_output_node(spec): grad_logits}
    param_grads: dict[str, dict[str, np.ndarray]] = {}

    def accumulate(name, g):
        if name in grads_act:
            grads_act[name] = grads_act[name] + g
        else:
            grads_act[name] = g

    for node in reversed(spec.nodes):
        if node.kind == "input":
            continue
        g = grads_act.pop(node.name, None)
        if g is None:
            continue
        kind = node.kind
        cache = caches[node.name]
        if kind == "conv2d":
            gx, gw, gb = layers.conv2d_backward(g, cache)
            entry = {"weights": gw}
            if gb is not None:
                entry["bias"] = gb
            param_grads[node.name] = entry
            accumulate(node.inputs[0], gx)
        elif kind == "batchnorm":
            gx, ggamma, gbeta = layers.batchnorm_backward(g, cache)
            param_grads[node.name] = {"gamma": ggamma, "beta": gbeta}
            accumulate(node.inputs[0], gx)
        elif kind == "relu":
            accumulate(node.inputs[0], layers.relu_backward(g, cache))
        elif kind == "maxpool2d":
            accumulate(node.inputs[0], layers.maxpool2d_backward(g, cache))
        elif kind == "avgpool2d":
            accumulate(node.inputs[0], layers.avgpool2d_backward(g, cache))
        elif kind == "globalavgpool":
            accumulate(node.inputs[0], layers.global_avgpool_backward(g, cache))
        elif kind == "dense":
            gx, gw, gb = layers.dense_backward(g, cache)
            param_grads[node.name] = {"weights": gw, "bias": gb}
            accumulate(node.inputs[0], gx)
        elif kind == "add":
            accumulate(node.inputs[0], g)
            accumulate(node.inputs[1], g)
        elif kind == "concat":
            start = 0
            for src, width in zip(node.inputs, cache):
                accumulate(src, g[:, :, :, start : start + width])
                start += width
        else:
            raise ValueError(f"unknown node kind {kind!r}")
    grad_input = grads_act.get("input")
    return param_grads, grad_input


def spec_to_json(spec: ModelSpec) -> dict:
    return {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "width_scale": spec.width_scale,
        "nodes": [
            {"name": n.name, "kind": n.kind, "inputs": list(n.inputs),
             "attrs": n.attrs, "trace": n.trace}
            for n in spec.nodes
        ],
    }


def spec_from_json(doc: dict) -> ModelSpec:
    nodes = tuple(
        LayerNode(n["name"], n["kind"], tuple(n["inputs"]), dict(n["attrs"]), n["trace"])
        for n in doc["nodes"]
    )
    return ModelSpec(doc["name"], tuple(doc["input_shape"]), doc["num_classes"],
                     doc["width_scale"], nodes)


def spec_hash(spec: ModelSpec) -> str:
    payload = json.dumps(spec_to_json(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
