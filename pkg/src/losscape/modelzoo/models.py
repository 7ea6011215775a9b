"""Model builders: MLP, a LeNet-style mini CNN and an explicit quadratic."""
from __future__ import annotations

import numpy as np

from ..autodiff import Graph, GraphBuilder
from ..errors import ConfigError

ACTIVATIONS = ("relu", "tanh")


def _head(b: GraphBuilder, logits: int, loss: str) -> int:
    y = b.input("y")
    if loss == "xent":
        return b.op("softmax_xent", logits, y)
    if loss == "mse":
        return b.op("mse", logits, y)
    raise ConfigError(f"unknown loss {loss!r}")


def _dense_layer(b: GraphBuilder, h: int, name: str, n_in: int, n_out: int) -> int:
    w = b.param(f"{name}.weight", (n_out, n_in), "dense")
    bias = b.param(f"{name}.bias", (n_out,), "bias", init="zeros")
    return b.op("bias_add", b.op("dense", h, w), bias)


def build_mlp(layer_sizes, activation: str = "relu", loss: str = "xent") -> Graph:
    """Fully connected network; the last size is the number of outputs."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ConfigError(f"an MLP needs at least two positive layer sizes, got {sizes}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    b = GraphBuilder()
    h = b.input("x")
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        h = _dense_layer(b, h, f"fc{i}", n_in, n_out)
        if i < len(sizes) - 2:
            h = b.op(activation, h)
    spec = {"kind": "mlp", "layer_sizes": sizes, "activation": activation, "loss": loss}
    return b.build(_head(b, h, loss), spec)


def lenet_feature_hw(input_hw: int, n_conv: int, kernel: int) -> int:
    h = input_hw
    for i in range(n_conv):
        h = h - kernel + 1
        if h < 1:
            raise ConfigError(f"conv layer {i} shrinks the feature map below 1x1 "
                              f"(input {input_hw}, kernel {kernel})")
        h = -(-h // 2)
    return h


def build_lenet_mini(input_hw: int, channels=(4, 8), num_classes: int = 10, in_channels: int = 1,
                     kernel: int = 3, hidden: int = 32, activation: str = "relu",
                     batchnorm: bool = False) -> Graph:
    """conv-pool-conv-pool-fc-fc on square inputs of side ``input_hw``."""
    channels = [int(c) for c in channels]
    if input_hw < 8:
        raise ConfigError(f"input_hw must be at least 8, got {input_hw}")
    if len(channels) != 2 or min(channels) < 1:
        raise ConfigError(f"lenet-mini takes two positive channel counts, got {channels}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    hw = lenet_feature_hw(input_hw, 2, kernel)
    b = GraphBuilder()
    h = b.input("x")
    c_in = in_channels
    for i, c_out in enumerate(channels):
        k = b.param(f"conv{i}.weight", (c_out, c_in, kernel, kernel), "conv")
        h = b.op("conv2d", h, k)
        if batchnorm:
            gamma = b.param(f"bn{i}.weight", (c_out,), "batchnorm", init="ones")
            beta = b.param(f"bn{i}.bias", (c_out,), "batchnorm", init="zeros")
            h = b.op("batchnorm", h, gamma, beta, mean=np.zeros(c_out), var=np.ones(c_out), eps=1e-5)
        else:
            h = b.op("bias_add", h, b.param(f"conv{i}.bias", (c_out,), "bias", init="zeros"))
        h = b.op("maxpool2", b.op(activation, h))
        c_in = c_out
    h = b.op("flatten", h)
    h = b.op(activation, _dense_layer(b, h, "fc0", c_in * hw * hw, hidden))
    h = _dense_layer(b, h, "fc1", hidden, num_classes)
    spec = {"kind": "lenet-mini", "input_hw": int(input_hw), "channels": channels,
            "num_classes": int(num_classes), "in_channels": int(in_channels), "kernel": int(kernel),
            "hidden": int(hidden), "activation": activation, "batchnorm": bool(batchnorm)}
    return b.build(_head(b, h, "xent"), spec)


def lenet_param_count(input_hw, channels, num_classes, in_channels=1, kernel=3, hidden=32) -> int:
    hw = lenet_feature_hw(input_hw, 2, kernel)
    c1, c2 = channels
    conv = c1 * in_channels * kernel ** 2 + c1 + c2 * c1 * kernel ** 2 + c2
    return conv + (c2 * hw * hw) * hidden + hidden + hidden * num_classes + num_classes


def build_quadratic(matrix) -> Graph:
    """L(theta) = 0.5 * theta^T A theta for a symmetric matrix A; ignores the batch."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError("quadratic form needs a square matrix")
    n = a.shape[0]
    b = GraphBuilder()
    theta = b.param("theta", (1, n), "dense", init="normal")
    atheta = b.op("dense", theta, b.const(a))
    out = b.op("scale", b.op("sum", b.op("mul", theta, atheta)), c=0.5)
    return b.build(out, {"kind": "quadratic", "n": n})


def build_model(spec: dict) -> Graph:
    """Rebuild a graph from the ``spec`` dict stored with trajectories."""
    kind = spec.get("kind")
    if kind == "mlp":
        return build_mlp(spec["layer_sizes"], spec.get("activation", "relu"), spec.get("loss", "xent"))
    if kind == "lenet-mini":
        return build_lenet_mini(spec["input_hw"], spec["channels"], spec["num_classes"],
                                spec.get("in_channels", 1), spec.get("kernel", 3),
                                spec.get("hidden", 32), spec.get("activation", "relu"),
                                spec.get("batchnorm", False))
    raise ConfigError(f"cannot rebuild model of kind {kind!r}")
