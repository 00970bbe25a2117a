"""Minimal dense networks with hand-written forward and backward passes.

Kept framework-free so every gradient in the package is analytic and
checkable against finite differences.  A network is a list of
:class:`DenseLayer`; trunks apply tanh after every layer, heads are pure
affine maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DenseLayer",
    "init_layer",
    "affine_forward",
    "affine_backward",
    "trunk_forward",
    "trunk_backward",
]


@dataclass
class DenseLayer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)


def init_layer(
    rng: np.random.Generator, fan_in: int, fan_out: int, scale: float | None = None
) -> DenseLayer:
    """Uniform fan-in initialisation; ``scale`` overrides the default bound."""
    bound = np.sqrt(1.0 / fan_in) if scale is None else scale
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return DenseLayer(weight=weight, bias=np.zeros(fan_out))


def affine_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return x @ layer.weight + layer.bias


def affine_backward(
    layer: DenseLayer, x: np.ndarray, g_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (w.r.t. input, weight, bias) given upstream ``g_out``."""
    g_w = x.T @ g_out
    g_b = g_out.sum(axis=0)
    g_x = g_out @ layer.weight.T
    return g_x, g_w, g_b


def trunk_forward(
    layers: list[DenseLayer], x: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward through tanh-activated layers; returns output and activations.

    The cache holds the input followed by every tanh output, which is all
    the backward pass needs.
    """
    cache = [x]
    h = x
    for layer in layers:
        h = np.tanh(affine_forward(layer, h))
        cache.append(h)
    return h, cache


def trunk_backward(
    layers: list[DenseLayer], cache: list[np.ndarray], g_out: np.ndarray
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Backprop through the trunk; returns input gradient and per-layer grads.

    Per-layer grads are (g_weight, g_bias) tuples in layer order.
    """
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)
    g = g_out
    for i in reversed(range(len(layers))):
        t = cache[i + 1]
        g_pre = g * (1.0 - t * t)
        g, g_w, g_b = affine_backward(layers[i], cache[i], g_pre)
        grads[i] = (g_w, g_b)
    return g, grads
