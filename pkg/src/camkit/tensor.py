"""Dense tensor kernels: forward passes and input-gradient passes.

Tensors are plain numpy arrays laid out as ``(channels, *spatial)``.  Every
kernel returns a fresh float32 array (float64 inputs stay float64, which the
finite-difference checks rely on).  Reductions accumulate in float64.

Only gradients with respect to inputs are provided; weights are fixed.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from camkit.errors import ConsistencyError, DimensionError

MAX_RANK = 5


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float array (float32 unless already float64)."""
    arr = np.asarray(x)
    dtype = np.float64 if arr.dtype == np.float64 else np.float32
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise DimensionError(f"tensor rank must be in 1..{MAX_RANK}, got {arr.ndim}")
    return arr


def _out_dtype(*arrays):
    return np.float64 if any(a.dtype == np.float64 for a in arrays) else np.float32


def _per_dim(value, dims, what):
    if np.isscalar(value):
        return (int(value),) * dims
    value = tuple(int(v) for v in value)
    if len(value) != dims:
        raise DimensionError(f"{what} has {len(value)} entries, expected {dims}")
    return value


def window_out_size(size, kernel, stride, pad=0):
    return (size + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    dims: int
    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple
    padding: tuple

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise DimensionError(f"convolution dims must be 2 or 3, got {self.dims}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise DimensionError("channel counts must be positive")
        for field in ("kernel", "stride", "padding"):
            object.__setattr__(self, field, _per_dim(getattr(self, field), self.dims, field))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise DimensionError(
                f"invalid kernel/stride/padding {self.kernel}/{self.stride}/{self.padding}"
            )

    @classmethod
    def from_params(cls, params: dict) -> "ConvSpec":
        dims = int(params["dims"])
        return cls(
            dims=dims,
            in_channels=int(params["in_channels"]),
            out_channels=int(params["out_channels"]),
            kernel=params["kernel"],
            stride=params.get("stride", 1),
            padding=params.get("padding", 0),
        )

    def to_params(self) -> dict:
        return {
            "dims": self.dims,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
        }

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_shape(self, input_shape):
        input_shape = tuple(input_shape)
        if len(input_shape) != self.dims + 1:
            raise DimensionError(
                f"conv{self.dims}d expects input rank {self.dims + 1} (C, spatial...), "
                f"got shape {input_shape}"
            )
        if input_shape[0] != self.in_channels:
            raise DimensionError(
                f"axis 0 (channels): input has {input_shape[0]}, conv expects {self.in_channels}"
            )
        out = []
        for axis, (n, k, s, p) in enumerate(
            zip(input_shape[1:], self.kernel, self.stride, self.padding), start=1
        ):
            m = window_out_size(n, k, s, p)
            if m < 1:
                raise DimensionError(
                    f"axis {axis}: size {n} with padding {p} is smaller than kernel {k}"
                )
            out.append(m)
        return (self.out_channels, *out)


def _check_weights(weights, spec):
    if tuple(weights.shape) != spec.weight_shape:
        raise DimensionError(
            f"weights have shape {tuple(weights.shape)}, expected {spec.weight_shape}"
        )


def conv_forward(x, weights, bias, spec: ConvSpec) -> np.ndarray:
    """Zero-padded cross-correlation of a single sample."""
    x = as_tensor(x)
    weights = as_tensor(weights)
    out_shape = spec.output_shape(x.shape)
    _check_weights(weights, spec)
    bias = np.zeros(spec.out_channels) if bias is None else np.asarray(bias, dtype=np.float64)
    if bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias has shape {bias.shape}, expected ({spec.out_channels},)")

    pad = [(0, 0)] + [(p, p) for p in spec.padding]
    xp = np.pad(x.astype(np.float64), pad)
    spatial_axes = tuple(range(1, spec.dims + 1))
    win = sliding_window_view(xp, spec.kernel, axis=spatial_axes)
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in spec.stride)]
    win = win[(slice(None),) + tuple(slice(0, m) for m in out_shape[1:])]
    # win: (Cin, *out, *kernel)
    w_axes = [1] + [2 + i for i in range(spec.dims)]
    x_axes = [0] + [1 + spec.dims + i for i in range(spec.dims)]
    out = np.tensordot(win, weights.astype(np.float64), axes=(x_axes, w_axes))
    out = np.moveaxis(out, -1, 0) + bias.reshape((-1,) + (1,) * spec.dims)
    return np.ascontiguousarray(out, dtype=_out_dtype(x, weights))


def conv_backward_input(grad_out, weights, spec: ConvSpec, input_shape) -> np.ndarray:
    """Transposed convolution of ``grad_out``: the gradient w.r.t. the conv input."""
    grad_out = as_tensor(grad_out)
    weights = as_tensor(weights)
    input_shape = tuple(input_shape)
    expected = spec.output_shape(input_shape)
    _check_weights(weights, spec)
    if tuple(grad_out.shape) != expected:
        raise DimensionError(
            f"grad_out has shape {tuple(grad_out.shape)}, forward output shape is {expected}"
        )
    padded = [input_shape[0]] + [n + 2 * p for n, p in zip(input_shape[1:], spec.padding)]
    gp = np.zeros(padded, dtype=np.float64)
    g64 = grad_out.astype(np.float64)
    w64 = weights.astype(np.float64)
    out_sp = expected[1:]
    for offset in itertools.product(*(range(k) for k in spec.kernel)):
        w_off = w64[(slice(None), slice(None)) + offset]  # (Cout, Cin)
        contrib = np.tensordot(w_off, g64, axes=([0], [0]))  # (Cin, *out)
        target = (slice(None),) + tuple(
            slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offset, spec.stride, out_sp)
        )
        gp[target] += contrib
    crop = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(spec.padding, input_shape[1:]))
    return np.ascontiguousarray(gp[crop], dtype=_out_dtype(grad_out, weights))


def relu_forward(x) -> np.ndarray:
    x = as_tensor(x)
    return np.maximum(x, 0).astype(x.dtype)


def relu_backward(grad_out, saved_input, mode: str = "standard") -> np.ndarray:
    """ReLU input gradient; ``mode="guided"`` also drops negative incoming gradients."""
    grad_out = as_tensor(grad_out)
    saved_input = as_tensor(saved_input)
    if grad_out.shape != saved_input.shape:
        raise DimensionError(
            f"relu grad_out shape {grad_out.shape} != saved input shape {saved_input.shape}"
        )
    gate = saved_input > 0
    if mode == "guided":
        gate &= grad_out > 0
    elif mode != "standard":
        raise ValueError(f"unknown relu mode {mode!r}")
    return np.where(gate, grad_out, 0).astype(grad_out.dtype)


def pool_output_shape(input_shape, kernel, stride, dims):
    input_shape = tuple(input_shape)
    if len(input_shape) != dims + 1:
        raise DimensionError(f"maxpool{dims}d expects rank {dims + 1}, got shape {input_shape}")
    kernel = _per_dim(kernel, dims, "kernel")
    stride = _per_dim(stride, dims, "stride")
    out = []
    for axis, (n, k, s) in enumerate(zip(input_shape[1:], kernel, stride), start=1):
        m = window_out_size(n, k, s)
        if k < 1 or s < 1 or m < 1:
            raise DimensionError(f"axis {axis}: pooling window {k} (stride {s}) does not fit size {n}")
        out.append(m)
    return (input_shape[0], *out)


def maxpool_forward(x, kernel, stride, dims):
    """Max pooling without padding.

    Returns ``(pooled, argmax)`` where ``argmax`` holds, for each output
    element, the flat (row-major) index into ``x`` of the winning element.
    Ties go to the lowest index.
    """
    x = as_tensor(x)
    kernel = _per_dim(kernel, dims, "kernel")
    stride = _per_dim(stride, dims, "stride")
    out_shape = pool_output_shape(x.shape, kernel, stride, dims)
    win = sliding_window_view(x, kernel, axis=tuple(range(1, dims + 1)))
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
    win = win[tuple(slice(0, m) for m in out_shape)]
    win = win.reshape(out_shape + (-1,))
    local = np.argmax(win, axis=-1)
    pooled = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]

    offsets = np.unravel_index(local, kernel)
    grids = np.indices(out_shape)
    coords = [grids[0]] + [
        grids[i + 1] * stride[i] + offsets[i] for i in range(dims)
    ]
    flat = np.ravel_multi_index(coords, x.shape).astype(np.int64)
    return np.ascontiguousarray(pooled, dtype=x.dtype), flat


def maxpool_backward(grad_out, argmax, input_shape) -> np.ndarray:
    grad_out = as_tensor(grad_out)
    argmax = np.asarray(argmax)
    if argmax.shape != grad_out.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != pooled shape {argmax.shape}"
        )
    size = int(np.prod(input_shape))
    if argmax.size and (argmax.min() < 0 or argmax.max() >= size):
        raise ConsistencyError(
            f"pooling index out of range for input of {size} elements"
        )
    grad = np.zeros(size, dtype=np.float64)
    np.add.at(grad, argmax.ravel(), grad_out.ravel().astype(np.float64))
    return grad.reshape(tuple(input_shape)).astype(grad_out.dtype)


def gap_forward(x) -> np.ndarray:
    """Global average pooling: per-channel spatial mean, returned as a vector."""
    x = as_tensor(x)
    if x.ndim < 2 or x[0].size == 0:
        raise DimensionError(f"global average pooling needs spatial axes, got shape {x.shape}")
    means = x.reshape(x.shape[0], -1).astype(np.float64).mean(axis=1)
    return means.astype(x.dtype)


def gap_backward(grad_out, input_shape) -> np.ndarray:
    grad_out = as_tensor(grad_out)
    input_shape = tuple(input_shape)
    if len(input_shape) < 2:
        raise DimensionError(f"global average pooling needs spatial axes, got shape {input_shape}")
    spatial = int(np.prod(input_shape[1:]))
    if spatial == 0:
        raise DimensionError("empty spatial extent")
    if grad_out.shape != (input_shape[0],):
        raise DimensionError(f"grad_out shape {grad_out.shape}, expected ({input_shape[0]},)")
    g = grad_out.astype(np.float64) / spatial
    out = np.broadcast_to(g.reshape((-1,) + (1,) * (len(input_shape) - 1)), input_shape)
    return np.ascontiguousarray(out, dtype=grad_out.dtype)


def linear_forward(x, weights, bias) -> np.ndarray:
    """``y = W @ x + b``; inputs of higher rank are flattened row-major."""
    x = as_tensor(x)
    weights = as_tensor(weights)
    if weights.ndim != 2 or weights.shape[1] != x.size:
        raise DimensionError(
            f"linear weights {weights.shape} incompatible with {x.size} input features"
        )
    y = weights.astype(np.float64) @ x.reshape(-1).astype(np.float64)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (weights.shape[0],):
            raise DimensionError(f"bias shape {bias.shape}, expected ({weights.shape[0]},)")
        y = y + bias
    return y.astype(_out_dtype(x, weights))


def linear_backward_input(grad_out, weights, input_shape=None) -> np.ndarray:
    grad_out = as_tensor(grad_out)
    weights = as_tensor(weights)
    if grad_out.shape != (weights.shape[0],):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match {weights.shape[0]} outputs"
        )
    g = weights.astype(np.float64).T @ grad_out.astype(np.float64)
    if input_shape is not None:
        g = g.reshape(tuple(input_shape))
    return g.astype(_out_dtype(grad_out, weights))


def interp_matrix(n_in: int, n_out: int, mode: str = "linear") -> np.ndarray:
    """Corner-aligned 1D resampling matrix of shape ``(n_out, n_in)``."""
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"interpolation sizes must be positive, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        pos = i * scale
        if mode == "nearest":
            m[i, min(int(np.floor(pos + 0.5)), n_in - 1)] = 1.0
        elif mode == "linear":
            lo = min(int(np.floor(pos)), n_in - 2)
            frac = pos - lo
            m[i, lo] += 1.0 - frac
            m[i, lo + 1] += frac
        else:
            raise ValueError(f"unknown interpolation mode {mode!r}")
    return m


def _resample(x, matrices):
    out = x.astype(np.float64)
    for axis, m in enumerate(matrices, start=1):
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)
    return np.ascontiguousarray(out, dtype=x.dtype)


def interpolate(x, target_spatial: Sequence[int], mode: str = "linear") -> np.ndarray:
    """Resample every channel of ``x`` to ``target_spatial`` (nearest or bi/trilinear)."""
    x = as_tensor(x)
    target_spatial = tuple(int(t) for t in target_spatial)
    if x.ndim - 1 != len(target_spatial):
        raise DimensionError(
            f"map has {x.ndim - 1} spatial axes but target has {len(target_spatial)}"
        )
    mats = [interp_matrix(n, t, mode) for n, t in zip(x.shape[1:], target_spatial)]
    return _resample(x, mats)


def interpolate_backward(grad_out, input_shape, mode: str = "linear") -> np.ndarray:
    """Adjoint of :func:`interpolate` (the resampling matrices transposed)."""
    grad_out = as_tensor(grad_out)
    input_shape = tuple(input_shape)
    if grad_out.ndim != len(input_shape) or grad_out.shape[0] != input_shape[0]:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} inconsistent with input shape {input_shape}"
        )
    mats = [interp_matrix(n, t, mode).T for n, t in zip(input_shape[1:], grad_out.shape[1:])]
    return _resample(grad_out, mats)


def softmax_forward(x) -> np.ndarray:
    """Softmax over the leading (class) axis."""
    x = as_tensor(x)
    z = x.astype(np.float64)
    z = np.exp(z - z.max(axis=0, keepdims=True))
    return (z / z.sum(axis=0, keepdims=True)).astype(x.dtype)
