"""Small hand-built and randomly generated models used by tests and the demo command."""
from __future__ import annotations

import numpy as np

from camkit.graph import LayerNode, ModelGraph


def conv(name, cin, cout, dims, kernel=3, stride=1, padding=None, inputs=()):
    if padding is None:
        padding = kernel // 2
    params = {
        "dims": dims,
        "in_channels": cin,
        "out_channels": cout,
        "kernel": [kernel] * dims,
        "stride": [stride] * dims,
        "padding": [padding] * dims,
    }
    return LayerNode(name, "conv", inputs, params)


def node(name, kind, inputs=(), **params):
    return LayerNode(name, kind, inputs, params)


def _rand_conv_weights(rng, n, scale=None):
    cout, cin, *k = n.params["out_channels"], n.params["in_channels"], *n.params["kernel"]
    fan_in = cin * int(np.prod(k))
    scale = scale or 1.0 / np.sqrt(fan_in)
    w = rng.normal(0.0, scale, size=(cout, cin, *k))
    b = rng.normal(0.0, 0.1, size=cout)
    return w.astype(np.float32), b.astype(np.float32)


def _rand_linear_weights(rng, n_out, n_in):
    w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
    b = rng.normal(0.0, 0.1, size=n_out)
    return w.astype(np.float32), b.astype(np.float32)


def tiny_classifier():
    """conv(1->1, k1) -> relu -> gap -> linear(1->2) on a (1, 4, 4) input."""
    nodes = [
        conv("conv", 1, 1, 2, kernel=1, padding=0),
        node("relu", "relu", ["conv"]),
        node("gap", "gap", ["relu"]),
        node("fc", "linear", ["gap"], in_features=1, out_features=2),
    ]
    weights = {
        "conv": (np.ones((1, 1, 1, 1)), np.zeros(1)),
        "fc": (np.array([[1.0], [-1.0]]), np.zeros(2)),
    }
    return ModelGraph((1, 4, 4), nodes, weights, task="classification")


def two_pathway(dims=2, size=8):
    """Two-channel classifier whose class k only sees input channel k.

    Each conv keeps channels separate (diagonal channel mixing), so the
    evidence for class 0 lives where channel 0 is bright and vice versa.
    """
    rng = np.random.default_rng(7)
    k = 3
    w1 = np.zeros((2, 2) + (k,) * dims)
    for c in range(2):
        w1[c, c] = np.abs(rng.normal(0.2, 0.05, size=(k,) * dims))
    w2 = np.zeros((2, 2) + (k,) * dims)
    for c in range(2):
        w2[c, c] = np.abs(rng.normal(0.2, 0.05, size=(k,) * dims))
    nodes = [
        conv("conv1", 2, 2, dims),
        node("relu1", "relu", ["conv1"]),
        conv("conv2", 2, 2, dims, inputs=["relu1"]),
        node("relu2", "relu", ["conv2"]),
        node("gap", "gap", ["relu2"]),
        node("fc", "linear", ["gap"], in_features=2, out_features=2),
    ]
    weights = {
        "conv1": (w1, np.zeros(2)),
        "conv2": (w2, np.zeros(2)),
        "fc": (np.eye(2), np.zeros(2)),
    }
    return ModelGraph((2,) + (size,) * dims, nodes, weights, task="classification")


def two_pathway_input(dims=2, size=8):
    """Input for :func:`two_pathway`: channel 0 bright near the origin corner, channel 1 at the far corner."""
    x = np.zeros((2,) + (size,) * dims, dtype=np.float32)
    q = size // 4
    near = (slice(0, q + 1),) * dims
    far = (slice(size - q - 1, size),) * dims
    x[(0,) + near] = 1.0
    x[(1,) + far] = 1.0
    return x


def pathway_regions(dims=2, size=8):
    """Boolean masks of the halves belonging to pathway 0 and pathway 1."""
    grid = np.indices((size,) * dims).sum(axis=0)
    mid = dims * (size - 1) / 2
    return grid < mid, grid > mid


def random_model(rng, dims=2, skip=False, task="classification", channels=2, size=6):
    """Random small model with at most four weighted layers.

    With ``skip`` a residual ``add`` (and, for segmentation, a ``concat``)
    creates fan-out so gradients from several paths must be summed.
    """
    spatial = (size,) * dims
    cin = channels
    hidden = int(rng.integers(2, 4))
    nodes = [conv("conv1", cin, hidden, dims)]
    nodes.append(node("relu1", "relu", ["conv1"]))
    last = "relu1"
    if skip:
        nodes.append(conv("conv2", hidden, hidden, dims, inputs=[last]))
        nodes.append(node("add", "add", ["conv2", last]))
        nodes.append(node("relu2", "relu", ["add"]))
        last = "relu2"
    if task == "classification":
        if rng.random() < 0.5 or size % 2:
            nodes.append(node("gap", "gap", [last]))
            n_in = hidden
            head_in = "gap"
        else:
            nodes.append(node("pool", "maxpool", [last], kernel=[2] * dims, stride=[2] * dims))
            n_in = hidden * (size // 2) ** dims
            head_in = "pool"
        nodes.append(node("fc", "linear", [head_in], in_features=n_in, out_features=3))
    else:
        nodes.append(node("pool", "maxpool", [last], kernel=[2] * dims, stride=[2] * dims))
        nodes.append(node("up", "upsample", ["pool"], size=list(spatial), mode="linear"))
        if skip:
            nodes.append(node("cat", "concat", ["up", last]))
            head_in, n_in = "cat", 2 * hidden
        else:
            head_in, n_in = "up", hidden
        nodes.append(conv("head", n_in, 2, dims, kernel=1, padding=0, inputs=[head_in]))

    weights = {}
    for n in nodes:
        if n.kind == "conv":
            weights[n.name] = _rand_conv_weights(rng, n)
        elif n.kind == "linear":
            weights[n.name] = _rand_linear_weights(
                rng, n.params["out_features"], n.params["in_features"]
            )
    return ModelGraph((cin,) + spatial, nodes, weights, task=task)


def segmentation_demo(dims=2, size=8):
    """Deterministic two-class segmenter: bright input regions score as class 1."""
    nodes = [
        conv("conv1", 1, 2, dims),
        node("relu1", "relu", ["conv1"]),
        conv("head", 2, 2, dims, kernel=1, padding=0, inputs=["relu1"]),
    ]
    k = (3,) * dims
    w1 = np.zeros((2, 1) + k)
    w1[0, 0] = -1.0 / np.prod(k)
    w1[1, 0] = 1.0 / np.prod(k)
    w2 = np.array([[1.0, -1.0], [-1.0, 1.0]]).reshape((2, 2) + (1,) * dims)
    weights = {
        "conv1": (w1, np.array([0.5, -0.5])),
        "head": (w2, np.zeros(2)),
    }
    return ModelGraph((1,) + (size,) * dims, nodes, weights, task="segmentation")
