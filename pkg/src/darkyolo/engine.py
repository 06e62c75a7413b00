"""Forward execution of a :class:`~darkyolo.netdef.NetworkGraph`."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._validation import check_tensor
from .exceptions import ShapeError
from .netdef import NetworkGraph, kernel_size
from .tensor import (
    activate,
    conv2d,
    fold_batchnorm,
    route_concat,
    shortcut_add,
    upsample,
)


@dataclass(frozen=True)
class ScaleSpec:
    """Geometry of one detection head.

    ``stride`` is input pixels per grid cell; for a 416 input the three heads
    of the full network have strides 32, 16, 8 and grids 13, 26, 52.
    """

    stride: float
    grid: tuple
    anchor_indices: tuple
    anchors: tuple
    n_classes: int
    layer: int


@dataclass(frozen=True)
class ForwardOutput:
    tensor: np.ndarray
    scale: ScaleSpec

    @property
    def boxes_per_cell(self):
        return len(self.scale.anchor_indices)


def grid_sizes(input_size, strides=(32, 16, 8)):
    """Grid extent per detection scale for a square input."""
    if input_size % max(strides):
        raise ValueError(f"input size {input_size} is not divisible by {max(strides)}")
    return tuple(input_size // s for s in strides)


def activation_cache_plan(graph: NetworkGraph) -> list:
    """Per layer, the set of earlier activations still live after it runs.

    An activation stays live until its last consumer has executed. The
    current layer's output is always part of its own set when anything later
    (or the caller, for detection heads) still reads it.
    """
    layers = graph.layers
    n = len(layers)
    last_use = {}
    for layer in layers:
        for src in layer.inputs:
            if src >= 0:
                last_use[src] = max(last_use.get(src, -1), layer.index)
    heads = set(graph.yolo_heads)
    plan = []
    live = set()
    for i in range(n):
        live.add(i)
        live = {j for j in live if last_use.get(j, -1) > i or (j == i and i in heads)}
        plan.append(frozenset(live))
    return plan


def peak_live_buffers(plan) -> int:
    return max((len(s) for s in plan), default=0)


def fold_graph(graph: NetworkGraph) -> NetworkGraph:
    """Same graph with batchnorm merged into each convolution's weights and bias."""
    params = {i: fold_batchnorm(p) for i, p in graph.params.items()}
    return replace(graph, params=params)


def _run_layer(layer, x, acts, graph):
    i = layer.index
    if layer.kind == "convolutional":
        p = graph.params[i]
        return activate(conv2d(x, p, layer=i), p.activation, p.slope)
    if layer.kind == "shortcut":
        out = shortcut_add(x, acts[layer["from"]], layer=i)
        return activate(out, layer.activation, layer.get("slope", 0.1))
    if layer.kind == "route":
        return route_concat([acts[j] for j in layer["layers"]], layer=i)
    if layer.kind == "upsample":
        return upsample(x, layer["stride"])
    return x


def forward(graph: NetworkGraph, x, plan=None) -> list:
    """Run one frame through ``graph`` and return the detection-head outputs.

    ``x`` is a ``(c, h, w)`` tensor matching the graph's input shape. Heads
    are returned coarsest first (largest stride). When ``plan`` is given,
    activations are released as soon as the plan marks them dead.
    """
    x = check_tensor(x, ndim=3)
    if x.shape != tuple(graph.input_shape):
        raise ShapeError(f"input shape {x.shape} != network input {tuple(graph.input_shape)}")
    input_h = x.shape[1]
    acts = {}
    heads = []
    for layer in graph.layers:
        i = layer.index
        prev = x if i == 0 else acts.get(i - 1)
        try:
            out = _run_layer(layer, prev, acts, graph)
        except ShapeError:
            raise
        except (ValueError, KeyError) as exc:
            raise ShapeError(str(exc), layer=i) from exc
        acts[i] = out
        if layer.kind == "yolo":
            c = out.shape[0]
            b = len(layer["mask"])
            want = kernel_size(b, layer["classes"])
            if c != want:
                raise ShapeError(f"head has {c} channels, expected {want}", layer=i)
            scale = ScaleSpec(
                stride=input_h / out.shape[1],
                grid=out.shape[1:],
                anchor_indices=tuple(layer["mask"]),
                anchors=layer.anchors,
                n_classes=layer["classes"],
                layer=i,
            )
            heads.append(ForwardOutput(out, scale))
        if plan is not None:
            keep = plan[i]
            for j in [j for j in acts if j not in keep and j != i]:
                del acts[j]
    heads.sort(key=lambda h: (-h.scale.stride, h.scale.layer))
    return heads
