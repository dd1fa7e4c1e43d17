"""Attention-map backends: Grad-CAM, Guided Backpropagation, Guided Grad-CAM, Grad-CAM++.

Every backend returns an :class:`AttentionMap` whose ``values`` have shape
``(1, *input_spatial)`` and lie in ``[0, 1]``.  Passing a precomputed
:class:`~camkit.graph.ActivationCache` lets several backends share a single
forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from camkit import tensor as T
from camkit.errors import ClassSpecError
from camkit.graph import INPUT, backward_from_output, forward_recorded, resolve_layer_spec

BACKENDS = ("gcam", "gbp", "ggcam", "gcampp")
SCOPES = ("all_positions", "predicted_positions")
NORMALIZE_EPS = 1e-12


@dataclass(frozen=True)
class ClassSpec:
    mode: str = "argmax"
    class_id: int | None = None
    segmentation_scope: str = "all_positions"

    def __post_init__(self):
        if self.mode not in ("argmax", "explicit"):
            raise ClassSpecError(f"unknown class mode {self.mode!r}")
        if self.mode == "explicit" and (self.class_id is None or self.class_id < 0):
            raise ClassSpecError("explicit class mode needs a nonnegative class_id")
        if self.segmentation_scope not in SCOPES:
            raise ClassSpecError(f"unknown segmentation scope {self.segmentation_scope!r}")

    @classmethod
    def parse(cls, text, scope="all_positions"):
        """``"auto"`` selects the argmax class, an integer selects that class."""
        scope = {"all": "all_positions", "predicted": "predicted_positions"}.get(scope, scope)
        if str(text) == "auto":
            return cls("argmax", None, scope)
        try:
            class_id = int(text)
        except ValueError:
            raise ClassSpecError(f"class must be 'auto' or an integer, got {text!r}") from None
        return cls("explicit", class_id, scope)


@dataclass
class AttentionMap:
    values: np.ndarray
    layer: str
    backend: str
    class_id: int
    raw: np.ndarray | None = None

    @property
    def spatial_shape(self):
        return self.values.shape[1:]


def select_class(logits, spec: ClassSpec, task="classification") -> int:
    logits = np.asarray(logits)
    n = logits.shape[0]
    if spec.mode == "explicit":
        if spec.class_id >= n:
            raise ClassSpecError(f"class {spec.class_id} out of range for {n} classes")
        return int(spec.class_id)
    if task == "segmentation":
        totals = logits.reshape(n, -1).astype(np.float64).sum(axis=1)
        return int(np.argmax(totals))
    return int(np.argmax(logits))


def isolate_class(output, spec: ClassSpec, task="classification"):
    """Seed tensor that keeps only the chosen class active in the logits."""
    output = T.as_tensor(output)
    c = select_class(output, spec, task)
    seed = np.zeros(output.shape, dtype=np.float32)
    if task == "segmentation" and spec.segmentation_scope == "predicted_positions":
        seed[c] = (np.argmax(output, axis=0) == c).astype(np.float32)
    else:
        seed[c] = 1.0
    return seed


def normalize_map(raw) -> np.ndarray:
    """Min-max rescale to ``[0, 1]``; a (near-)constant map becomes all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi - lo < NORMALIZE_EPS:
        return np.zeros(raw.shape, dtype=np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def _spatial_axes(a):
    return tuple(range(1, a.ndim))


def grad_cam_raw(activation, gradient) -> np.ndarray:
    """``ReLU(sum_k mean(G_k) * A_k)`` at layer resolution, shape ``(1, *spatial)``."""
    a = np.asarray(activation, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    weights = g.mean(axis=_spatial_axes(g))
    cam = np.tensordot(weights, a, axes=([0], [0]))
    return np.maximum(cam, 0)[None]


def gradcampp_alpha(gradient, activation) -> np.ndarray:
    """Per-position weights ``g^2 / (2 g^2 + sum(A) g^3)``, zero where the denominator is zero."""
    g = np.asarray(gradient, dtype=np.float64)
    a = np.asarray(activation, dtype=np.float64)
    g2 = g * g
    g3 = g2 * g
    sum_a = a.sum(axis=_spatial_axes(a), keepdims=True)
    denom = 2.0 * g2 + sum_a * g3
    return np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0)


def grad_cam_pp_raw(activation, gradient) -> np.ndarray:
    a = np.asarray(activation, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    alpha = gradcampp_alpha(g, a)
    weights = (alpha * np.maximum(g, 0)).sum(axis=_spatial_axes(g))
    cam = np.tensordot(weights, a, axes=([0], [0]))
    return np.maximum(cam, 0)[None]


def combine(guided, cam) -> np.ndarray:
    """Elementwise product of a guided-backprop map and an input-resolution CAM."""
    guided = np.asarray(guided, dtype=np.float64)
    cam = np.asarray(cam, dtype=np.float64)
    if guided.shape != cam.shape:
        raise ValueError(f"cannot combine maps of shape {guided.shape} and {cam.shape}")
    return guided * cam


def _prepare(model, x, class_spec, cache):
    if cache is None:
        cache = forward_recorded(model, x)
    class_spec = class_spec or ClassSpec()
    c = select_class(cache.logits, class_spec, model.task)
    seed = isolate_class(cache.logits, class_spec, model.task)
    return cache, c, seed


def _single_layer(model, layer):
    names = resolve_layer_spec(model, layer)
    if len(names) != 1:
        raise ValueError(f"expected exactly one layer, {layer!r} resolves to {names}")
    return names[0]


def _cam(model, x, class_spec, layer, cache, backend, raw_fn):
    layer = _single_layer(model, layer)
    cache, c, seed = _prepare(model, x, class_spec, cache)
    grad = backward_from_output(model, cache, seed, stop_at=layer, relu_mode="standard")
    raw = raw_fn(cache[layer], grad)
    upsampled = T.interpolate(raw, model.input_shape[1:], "linear")
    return AttentionMap(normalize_map(upsampled), layer, backend, c, raw)


def grad_cam(model, x=None, class_spec=None, layer="auto", cache=None) -> AttentionMap:
    return _cam(model, x, class_spec, layer, cache, "gcam", grad_cam_raw)


def grad_cam_pp(model, x=None, class_spec=None, layer="auto", cache=None) -> AttentionMap:
    return _cam(model, x, class_spec, layer, cache, "gcampp", grad_cam_pp_raw)


def guided_backprop(model, x=None, class_spec=None, cache=None) -> AttentionMap:
    cache, c, seed = _prepare(model, x, class_spec, cache)
    grad = backward_from_output(model, cache, seed, stop_at=INPUT, relu_mode="guided")
    # several input channels collapse to the largest magnitude per position
    raw = np.abs(np.asarray(grad, dtype=np.float64)).max(axis=0, keepdims=True)
    return AttentionMap(normalize_map(raw), "input", "gbp", c, raw)


def guided_grad_cam(model, x=None, class_spec=None, layer="auto", cache=None) -> AttentionMap:
    if cache is None:
        cache = forward_recorded(model, x)
    cam = grad_cam(model, class_spec=class_spec, layer=layer, cache=cache)
    guided = guided_backprop(model, class_spec=class_spec, cache=cache)
    raw = combine(guided.values, cam.values)
    return AttentionMap(normalize_map(raw), cam.layer, "ggcam", cam.class_id, raw)


def generate(model, backend, x=None, class_spec=None, layer="auto", cache=None) -> AttentionMap:
    """Dispatch to one backend by its short name."""
    if backend == "gcam":
        return grad_cam(model, x, class_spec, layer, cache)
    if backend == "gcampp":
        return grad_cam_pp(model, x, class_spec, layer, cache)
    if backend == "ggcam":
        return guided_grad_cam(model, x, class_spec, layer, cache)
    if backend == "gbp":
        return guided_backprop(model, x, class_spec, cache)
    raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
