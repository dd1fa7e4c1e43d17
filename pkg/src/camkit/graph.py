"""Declarative model graphs: validation, recorded forward, and gradients to any layer.

A :class:`ModelGraph` is an immutable, topologically ordered list of
:class:`LayerNode` objects plus fixed weights.  Running
:func:`forward_recorded` keeps every intermediate activation so that
:func:`backward_from_output` can later push a seed from the output back to an
arbitrary named layer (or to the input) without touching the prediction path.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from camkit import tensor as T
from camkit.errors import (
    DimensionError,
    GraphError,
    LayerCapabilityError,
    ModelFormatError,
    ReachabilityError,
    UnknownLayerError,
    UnsupportedKindError,
    WeightShapeError,
)

KINDS = ("conv", "relu", "maxpool", "gap", "linear", "add", "concat", "upsample", "softmax")
WEIGHTED = ("conv", "linear")
# kinds whose output can keep the (C, spatial...) layout of the input
SPATIAL_KINDS = frozenset({"conv", "relu", "maxpool", "add", "concat", "upsample"})
TASKS = ("classification", "segmentation")

INPUT = "@input"

MAGIC = b"CAMM"
VERSION = 1
_PREAMBLE = struct.Struct("<4sII")


@dataclass(frozen=True)
class LayerNode:
    name: str
    kind: str
    inputs: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "params", dict(self.params))


class LayerInfo(NamedTuple):
    name: str
    kind: str
    output_shape: tuple
    attention_capable: bool


class ModelGraph:
    """Validated layer DAG with weights and cached per-node output shapes.

    ``weights`` maps each conv/linear node name to a ``(weight, bias)`` pair.
    ``task=None`` skips the output-layout check, which is only useful for
    feature-extractor views such as :meth:`truncated`.
    """

    def __init__(self, input_shape, nodes, weights=None, task="classification", output_name=None):
        self.input_shape = tuple(int(n) for n in input_shape)
        if not 2 <= len(self.input_shape) <= 4 or min(self.input_shape) < 1:
            raise DimensionError(
                f"input shape must be (C, H, W) or (C, D, H, W), got {self.input_shape}"
            )
        self.nodes = tuple(nodes)
        if not self.nodes:
            raise GraphError("model graph has no nodes")
        if task is not None and task not in TASKS:
            raise GraphError(f"unknown task {task!r}; expected one of {TASKS}")
        self.task = task
        self.output_name = output_name if output_name is not None else self.nodes[-1].name
        self._index = {}
        self.shapes = {}
        self.weights = {}
        weights = weights or {}

        for pos, node in enumerate(self.nodes):
            if not node.name or node.name == INPUT:
                raise GraphError(f"node #{pos} has an invalid name {node.name!r}")
            if node.name in self._index:
                raise GraphError(f"duplicate node name {node.name!r}")
            if node.kind not in KINDS:
                raise UnsupportedKindError(node.kind)
            for src in node.inputs:
                if src not in self._index:
                    if any(n.name == src for n in self.nodes[pos:]):
                        raise GraphError(
                            f"node {node.name!r} references {src!r}, which is not an earlier node "
                            "(forward reference or cycle)"
                        )
                    raise GraphError(f"node {node.name!r} references unknown node {src!r}")
            self._index[node.name] = pos
            self.shapes[node.name] = self._infer_shape(node)
            if node.kind in WEIGHTED:
                self.weights[node.name] = self._check_weights(node, weights.get(node.name))

        extra = set(weights) - set(self.weights)
        if extra:
            raise GraphError(f"weights given for unknown or unweighted nodes: {sorted(extra)}")
        if self.output_name not in self._index:
            raise GraphError(f"output node {self.output_name!r} does not exist")
        for node in self.nodes:
            if node.kind == "softmax" and node.name != self.output_name:
                raise GraphError(f"softmax node {node.name!r} must be the model output")
        self._check_task()

    # -- construction helpers -------------------------------------------------

    def _in_shapes(self, node):
        if not node.inputs:
            return [self.input_shape]
        return [self.shapes[src] for src in node.inputs]

    def _infer_shape(self, node):
        ins = self._in_shapes(node)
        kind, p = node.kind, node.params
        try:
            if kind in ("add", "concat"):
                if len(node.inputs) < 2:
                    raise GraphError(f"{kind} node {node.name!r} needs at least 2 inputs")
            elif len(ins) != 1:
                raise GraphError(f"{kind} node {node.name!r} takes exactly 1 input")
            x = ins[0]
            if kind == "conv":
                return T.ConvSpec.from_params(p).output_shape(x)
            if kind in ("relu", "softmax"):
                return x
            if kind == "maxpool":
                dims = len(x) - 1
                return T.pool_output_shape(x, p["kernel"], p.get("stride", p["kernel"]), dims)
            if kind == "gap":
                if len(x) < 2:
                    raise DimensionError(f"gap needs spatial axes, got {x}")
                return (x[0],)
            if kind == "linear":
                n_in = int(np.prod(x))
                if int(p["in_features"]) != n_in:
                    raise DimensionError(
                        f"in_features={p['in_features']} but incoming tensor {x} has {n_in} elements"
                    )
                return (int(p["out_features"]),)
            if kind == "add":
                if any(s != x for s in ins):
                    raise DimensionError(f"add inputs differ in shape: {ins}")
                return x
            if kind == "concat":
                if any(len(s) != len(x) or s[1:] != x[1:] for s in ins):
                    raise DimensionError(f"concat inputs differ outside the channel axis: {ins}")
                return (sum(s[0] for s in ins), *x[1:])
            if kind == "upsample":
                return (x[0], *_upsample_size(p, x))
        except KeyError as exc:
            raise GraphError(f"node {node.name!r} is missing parameter {exc.args[0]!r}") from None
        except (DimensionError, ValueError, TypeError) as exc:
            if isinstance(exc, GraphError):
                raise
            raise DimensionError(f"node {node.name!r}: {exc}") from None
        raise UnsupportedKindError(kind)

    def _check_weights(self, node, pair):
        if pair is None:
            raise WeightShapeError(f"node {node.name!r} has no weights")
        w, b = pair
        w = T.as_tensor(w).astype(np.float32)
        b = T.as_tensor(b).astype(np.float32)
        if node.kind == "conv":
            spec = T.ConvSpec.from_params(node.params)
            w_shape, b_shape = spec.weight_shape, (spec.out_channels,)
        else:
            w_shape = (int(node.params["out_features"]), int(node.params["in_features"]))
            b_shape = (w_shape[0],)
        if w.shape != w_shape:
            raise WeightShapeError(
                f"node {node.name!r}: weight shape {w.shape} != expected {w_shape}"
            )
        if b.shape != b_shape:
            raise WeightShapeError(f"node {node.name!r}: bias shape {b.shape} != expected {b_shape}")
        w.setflags(write=False)
        b.setflags(write=False)
        return w, b

    def _check_task(self):
        out = self.output_shape
        if self.task == "classification" and len(out) != 1:
            raise GraphError(f"classification output must be a vector of logits, got shape {out}")
        if self.task == "segmentation" and (
            len(out) != len(self.input_shape) or out[1:] != self.input_shape[1:]
        ):
            raise GraphError(
                f"segmentation output {out} must be (classes, {self.input_shape[1:]})"
            )

    # -- accessors ------------------------------------------------------------

    @property
    def spatial_dims(self):
        return len(self.input_shape) - 1

    @property
    def output_shape(self):
        return self.shapes[self.output_name]

    @property
    def logits_name(self):
        """Node whose output is seeded: the output, or the input of a final softmax."""
        out = self.node(self.output_name)
        if out.kind == "softmax":
            return out.inputs[0] if out.inputs else INPUT
        return out.name

    @property
    def num_classes(self):
        shape = self.input_shape if self.logits_name == INPUT else self.shapes[self.logits_name]
        return shape[0]

    def node(self, name):
        try:
            return self.nodes[self._index[name]]
        except KeyError:
            raise UnknownLayerError(
                f"no layer named {name!r}; available: {', '.join(self.names)}"
            ) from None

    @property
    def names(self):
        return [n.name for n in self.nodes]

    def position(self, name):
        return self._index[name]

    def is_attention_capable(self, name):
        node = self.node(name)
        shape = self.shapes[name]
        return node.kind in SPATIAL_KINDS and len(shape) == len(self.input_shape)

    def ancestors(self, name):
        """``name`` plus every node it (transitively) reads from."""
        seen = set()
        stack = [name]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(self.node(cur).inputs)
        return seen

    def truncated(self, name):
        """Feature-extractor view ending at ``name`` (task check disabled)."""
        keep = self.ancestors(name)
        nodes = [n for n in self.nodes if n.name in keep]
        weights = {k: v for k, v in self.weights.items() if k in keep}
        return ModelGraph(self.input_shape, nodes, weights, task=None, output_name=name)

    def __repr__(self):
        return (
            f"ModelGraph(task={self.task!r}, input_shape={self.input_shape}, "
            f"nodes={len(self.nodes)}, output={self.output_name!r})"
        )


def _upsample_size(params, in_shape):
    spatial = in_shape[1:]
    if "size" in params:
        size = tuple(int(s) for s in params["size"])
    else:
        scale = params["scale"]
        scale = [scale] * len(spatial) if np.isscalar(scale) else list(scale)
        size = tuple(int(n) * int(s) for n, s in zip(spatial, scale))
    if len(size) != len(spatial) or min(size) < 1:
        raise DimensionError(f"upsample size {size} invalid for input {in_shape}")
    if params.get("mode", "nearest") not in ("nearest", "linear"):
        raise DimensionError(f"unknown upsample mode {params.get('mode')!r}")
    return size


# ---------------------------------------------------------------------------
# layer discovery


def list_layers(model: ModelGraph):
    return [
        LayerInfo(n.name, n.kind, model.shapes[n.name], model.is_attention_capable(n.name))
        for n in model.nodes
    ]


def resolve_layer_spec(model: ModelGraph, spec="auto"):
    """Turn ``"auto"``, ``"full"``, a name, a comma list, or a list of names into layer names."""
    capable = [n.name for n in model.nodes if model.is_attention_capable(n.name)]
    if isinstance(spec, str):
        if spec == "auto":
            if not capable:
                raise LayerCapabilityError("model has no attention-capable layer")
            return [capable[-1]]
        if spec == "full":
            return capable
        spec = [s.strip() for s in spec.split(",") if s.strip()]
    names = list(spec)
    if not names:
        raise UnknownLayerError("empty layer specification")
    for name in names:
        node = model.node(name)
        if name not in capable:
            raise LayerCapabilityError(
                f"layer {name!r} of kind {node.kind!r} with output shape "
                f"{model.shapes[name]} cannot be projected onto the input"
            )
    return names


# ---------------------------------------------------------------------------
# forward


@dataclass
class ActivationCache:
    input: np.ndarray
    activations: dict
    argmax: dict
    output_name: str
    logits_name: str

    @property
    def output(self):
        return self.activations[self.output_name]

    @property
    def logits(self):
        if self.logits_name == INPUT:
            return self.input
        return self.activations[self.logits_name]

    def __getitem__(self, name):
        return self.activations[name]

    def __contains__(self, name):
        return name in self.activations


def _forward_node(model, node, ins):
    """Returns ``(output, aux)``; aux is the pooling argmax for maxpool nodes."""
    kind, p = node.kind, node.params
    x = ins[0]
    if kind == "conv":
        w, b = model.weights[node.name]
        return T.conv_forward(x, w, b, T.ConvSpec.from_params(p)), None
    if kind == "relu":
        return T.relu_forward(x), None
    if kind == "maxpool":
        return T.maxpool_forward(x, p["kernel"], p.get("stride", p["kernel"]), x.ndim - 1)
    if kind == "gap":
        return T.gap_forward(x), None
    if kind == "linear":
        w, b = model.weights[node.name]
        return T.linear_forward(x, w, b), None
    if kind == "add":
        out = ins[0].astype(np.float64)
        for other in ins[1:]:
            out = out + other
        return out.astype(x.dtype), None
    if kind == "concat":
        return np.concatenate(ins, axis=0), None
    if kind == "upsample":
        return T.interpolate(x, model.shapes[node.name][1:], p.get("mode", "nearest")), None
    if kind == "softmax":
        return T.softmax_forward(x), None
    raise UnsupportedKindError(kind)


def _run(model, x, keep):
    x = T.as_tensor(x)
    if tuple(x.shape) != model.input_shape:
        raise DimensionError(f"input shape {tuple(x.shape)} != model input shape {model.input_shape}")
    acts, argmax = {}, {}
    consumers = {}
    if not keep:
        for node in model.nodes:
            for src in node.inputs:
                consumers[src] = model.position(node.name)
    for pos, node in enumerate(model.nodes):
        ins = [acts[s] for s in node.inputs] if node.inputs else [x]
        out, aux = _forward_node(model, node, ins)
        acts[node.name] = out
        if aux is not None and keep:
            argmax[node.name] = aux
        if not keep:
            for src in node.inputs:
                if consumers.get(src) == pos and src != model.output_name:
                    del acts[src]
    return x, acts, argmax


def forward(model: ModelGraph, x) -> np.ndarray:
    """Plain forward pass; intermediates are dropped once consumed."""
    _, acts, _ = _run(model, x, keep=False)
    return acts[model.output_name]


def forward_recorded(model: ModelGraph, x) -> ActivationCache:
    x, acts, argmax = _run(model, x, keep=True)
    return ActivationCache(x, acts, argmax, model.output_name, model.logits_name)


# ---------------------------------------------------------------------------
# backward


def _backward_node(model, node, grad, cache, relu_mode):
    """Gradients for each of ``node``'s inputs, in order."""
    kind, p = node.kind, node.params
    in_shapes = model._in_shapes(node)
    ins = [cache[s] for s in node.inputs] if node.inputs else [cache.input]
    if kind == "conv":
        w, _ = model.weights[node.name]
        return [T.conv_backward_input(grad, w, T.ConvSpec.from_params(p), in_shapes[0])]
    if kind == "relu":
        return [T.relu_backward(grad, ins[0], relu_mode)]
    if kind == "maxpool":
        return [T.maxpool_backward(grad, cache.argmax[node.name], in_shapes[0])]
    if kind == "gap":
        return [T.gap_backward(grad, in_shapes[0])]
    if kind == "linear":
        w, _ = model.weights[node.name]
        return [T.linear_backward_input(grad, w, in_shapes[0])]
    if kind == "add":
        return [grad] * len(ins)
    if kind == "concat":
        bounds = np.cumsum([s[0] for s in in_shapes])[:-1]
        return list(np.split(grad, bounds, axis=0))
    if kind == "upsample":
        return [T.interpolate_backward(grad, in_shapes[0], p.get("mode", "nearest"))]
    raise UnsupportedKindError(kind)


def backward_from_output(
    model: ModelGraph,
    cache: ActivationCache,
    seed,
    stop_at=INPUT,
    relu_mode="standard",
    trace=None,
):
    """Gradient of ``sum(seed * logits)`` with respect to ``stop_at``'s activation.

    The seed is applied to the logits, so a final softmax node is bypassed.
    Gradients from fan-out are summed.  When ``trace`` is a dict it receives
    the accumulated gradient at the output of every node that was visited.
    """
    start = model.logits_name
    seed = T.as_tensor(seed)
    logits_shape = model.input_shape if start == INPUT else model.shapes[start]
    if tuple(seed.shape) != logits_shape:
        raise DimensionError(f"seed shape {tuple(seed.shape)} != output shape {logits_shape}")
    if stop_at == start:
        return seed.copy()
    if start == INPUT:
        raise ReachabilityError(f"layer {stop_at!r} does not feed the model output")

    upstream = model.ancestors(start)
    if stop_at == INPUT:
        relevant = upstream
    else:
        model.node(stop_at)
        if stop_at not in upstream:
            raise ReachabilityError(f"layer {stop_at!r} does not feed the model output")
        relevant = {
            n.name
            for n in model.nodes
            if n.name in upstream and stop_at in model.ancestors(n.name)
        }

    grads = {start: seed}
    grad_input = None
    for node in reversed(model.nodes):
        if node.name not in relevant:
            continue
        g = grads.pop(node.name, None)
        if g is None:
            continue
        if trace is not None:
            trace[node.name] = g
        if node.name == stop_at:
            return g
        in_grads = _backward_node(model, node, g, cache, relu_mode)
        if not node.inputs:
            grad_input = in_grads[0] if grad_input is None else grad_input + in_grads[0]
            continue
        for src, gi in zip(node.inputs, in_grads):
            if src in relevant:
                grads[src] = gi if src not in grads else grads[src] + gi
    if stop_at != INPUT:
        raise ReachabilityError(f"no gradient reached layer {stop_at!r}")
    return grad_input


# ---------------------------------------------------------------------------
# container format


def model_to_bytes(model: ModelGraph) -> bytes:
    blob = []
    offset = 0
    nodes = []
    for node in model.nodes:
        entry = {
            "name": node.name,
            "kind": node.kind,
            "params": node.params,
            "inputs": list(node.inputs),
        }
        if node.kind in WEIGHTED:
            w, b = model.weights[node.name]
            entry.update(weight_offset=offset, weight_len=int(w.size))
            offset += w.size
            entry.update(bias_offset=offset, bias_len=int(b.size))
            offset += b.size
            blob.extend([w.ravel(), b.ravel()])
        nodes.append(entry)
    header = {
        "input_shape": list(model.input_shape),
        "task": model.task,
        "output": model.output_name,
        "nodes": nodes,
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    data = np.concatenate(blob).astype("<f4").tobytes() if blob else b""
    return _PREAMBLE.pack(MAGIC, VERSION, len(hbytes)) + hbytes + data


def save_model(model: ModelGraph, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def model_from_bytes(raw: bytes) -> ModelGraph:
    if len(raw) < _PREAMBLE.size:
        raise ModelFormatError(f"file too short for header ({len(raw)} bytes)", len(raw))
    magic, version, hlen = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise ModelFormatError(f"unsupported format version {version}", 4)
    start = _PREAMBLE.size
    if start + hlen > len(raw):
        raise ModelFormatError(
            f"header length {hlen} exceeds file size {len(raw)}", 8
        )
    hbytes = raw[start:start + hlen]
    try:
        text = hbytes.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFormatError("header is not valid UTF-8", start + exc.start) from None
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        where = start + len(text[:exc.pos].encode("utf-8"))
        raise ModelFormatError(f"malformed header JSON: {exc.msg}", where) from None

    blob_start = start + hlen
    tail = raw[blob_start:]
    if len(tail) % 4:
        raise ModelFormatError(f"weight blob length {len(tail)} is not a multiple of 4", blob_start)
    blob = np.frombuffer(tail, dtype="<f4")

    try:
        entries = header["nodes"]
        input_shape = header["input_shape"]
        task = header["task"]
        output_name = header.get("output")
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"header lacks required field {exc}", start) from None

    nodes, weights = [], {}
    for entry in entries:
        try:
            node = LayerNode(entry["name"], entry["kind"], entry.get("inputs", ()), entry.get("params", {}))
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"node entry lacks field {exc}", start) from None
        if node.kind not in KINDS:
            raise UnsupportedKindError(node.kind)
        if node.kind in WEIGHTED:
            arrays = []
            for key in ("weight", "bias"):
                try:
                    off, n = int(entry[f"{key}_offset"]), int(entry[f"{key}_len"])
                except KeyError as exc:
                    raise ModelFormatError(
                        f"node {node.name!r} lacks {exc.args[0]!r}", start
                    ) from None
                if off < 0 or n < 0 or off + n > blob.size:
                    raise ModelFormatError(
                        f"node {node.name!r}: {key} range [{off}, {off + n}) outside blob of "
                        f"{blob.size} floats",
                        blob_start + 4 * max(off, 0),
                    )
                arrays.append(blob[off:off + n].astype(np.float32))
            w, b = arrays
            w = _reshape_weights(node, w)
            weights[node.name] = (w, b)
        nodes.append(node)
    return ModelGraph(input_shape, nodes, weights, task=task, output_name=output_name)


def _reshape_weights(node, flat):
    p = node.params
    try:
        if node.kind == "conv":
            shape = T.ConvSpec.from_params(p).weight_shape
        else:
            shape = (int(p["out_features"]), int(p["in_features"]))
    except (KeyError, DimensionError) as exc:
        raise GraphError(f"node {node.name!r}: bad parameters ({exc})") from None
    if flat.size != int(np.prod(shape)):
        raise WeightShapeError(
            f"node {node.name!r}: weight shape ({flat.size},) does not fit expected {shape}"
        )
    return flat.reshape(shape)


def load_model(path) -> ModelGraph:
    return model_from_bytes(Path(path).read_bytes())
