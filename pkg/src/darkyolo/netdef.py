"""Darknet network definitions and binary weights files.

A definition is an INI-like text of ``[section]`` headers followed by
``key=value`` lines. The optional leading ``[net]`` section carries the input
geometry; every other section is one layer. The weights file is a small
little-endian header followed by raw float32 parameters for each
convolutional layer, in network order.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional

import numpy as np

from .exceptions import NetDefError, WeightsError
from .tensor import DEFAULT_LEAKY_SLOPE, BatchNorm, ConvParams, conv_output_extent

LAYER_KINDS = ("convolutional", "shortcut", "route", "upsample", "yolo")
_ALIASES = {"conv": "convolutional", "net": "net", "network": "net"}
_MANDATORY = {
    "convolutional": ("filters", "size", "stride"),
    "shortcut": ("from",),
    "route": ("layers",),
    "upsample": (),
    "yolo": ("mask", "anchors", "classes"),
}
_INT_KEYS = {"filters", "size", "stride", "pad", "padding", "batch_normalize", "classes", "num"}
_FLOAT_KEYS = {"slope"}

SUPPORTED_MAJOR_VERSIONS = (0, 1, 2)


def kernel_size(boxes_per_cell: int, n_classes: int) -> int:
    """Filter count of a detection head: ``B * (4 box offsets + 1 objectness + C)``."""
    if boxes_per_cell < 1 or n_classes < 1:
        raise ValueError("boxes_per_cell and n_classes must both be >= 1")
    return boxes_per_cell * (5 + n_classes)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    index: int
    attributes: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "attributes", MappingProxyType(dict(self.attributes)))

    def get(self, key, default=None):
        return self.attributes.get(key, default)

    def __getitem__(self, key):
        return self.attributes[key]

    @property
    def references(self) -> tuple:
        """Absolute indices of earlier layers this layer reads besides its predecessor."""
        if self.kind == "shortcut":
            return (self.attributes["from"],)
        if self.kind == "route":
            return tuple(self.attributes["layers"])
        return ()

    @property
    def inputs(self) -> tuple:
        """Every layer index whose activation this layer consumes (-1 is the network input)."""
        if self.kind == "route":
            return self.references
        if self.kind == "shortcut":
            return (self.index - 1, self.attributes["from"])
        return (self.index - 1,)

    # convolution geometry, Darknet semantics: pad=1 means "same" padding
    @property
    def padding(self) -> int:
        if self.get("pad", 0):
            return self["size"] // 2
        return self.get("padding", 0)

    @property
    def batch_normalize(self) -> bool:
        return bool(self.get("batch_normalize", 0))

    @property
    def activation(self) -> str:
        default = "linear" if self.kind == "shortcut" else "logistic"
        return self.get("activation", default)

    @property
    def anchors(self) -> tuple:
        """Anchor ``(w, h)`` pairs selected by this yolo layer's mask."""
        return tuple(self["anchors"][m] for m in self["mask"])


@dataclass(frozen=True)
class NetDefinition:
    input_shape: tuple
    layers: tuple
    options: Mapping = field(default_factory=dict)

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    @property
    def yolo_indices(self) -> tuple:
        return tuple(l.index for l in self.layers if l.kind == "yolo")


def _convert(key, raw, index, lineno):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in ("from",):
            return int(raw)
        if key in ("layers", "mask"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key == "anchors":
            vals = [float(v) for v in raw.split(",") if v.strip()]
            if len(vals) % 2:
                raise ValueError("odd number of anchor values")
            return tuple((vals[i], vals[i + 1]) for i in range(0, len(vals), 2))
    except ValueError as exc:
        raise NetDefError(f"line {lineno}: bad value for {key!r} in layer {index}: {exc}") from None
    return raw


def _resolve(ref, index, key):
    absolute = index + ref if ref < 0 else ref
    if not 0 <= absolute < index:
        raise NetDefError(
            f"layer {index}: {key} reference {ref} resolves to {absolute}, "
            "which is not an earlier layer"
        )
    return absolute


def _finish_layer(kind, index, attrs):
    for key in _MANDATORY[kind]:
        if key not in attrs:
            raise NetDefError(f"layer {index} ({kind}): missing mandatory attribute {key!r}")
    if kind == "shortcut":
        attrs["from"] = _resolve(attrs["from"], index, "from")
    elif kind == "route":
        if not attrs["layers"]:
            raise NetDefError(f"layer {index} (route): empty layers list")
        attrs["layers"] = tuple(_resolve(r, index, "layers") for r in attrs["layers"])
    elif kind == "convolutional":
        for key in ("filters", "size", "stride"):
            if attrs[key] < 1:
                raise NetDefError(f"layer {index}: {key} must be >= 1")
    elif kind == "upsample":
        attrs.setdefault("stride", 2)
        if attrs["stride"] < 1:
            raise NetDefError(f"layer {index}: upsample stride must be >= 1")
    elif kind == "yolo":
        anchors = attrs["anchors"]
        if any(w <= 0 or h <= 0 for w, h in anchors):
            raise NetDefError(f"layer {index}: anchors must be positive")
        if any(not 0 <= m < len(anchors) for m in attrs["mask"]):
            raise NetDefError(f"layer {index}: mask indexes outside the {len(anchors)} anchors")
        if not attrs["mask"]:
            raise NetDefError(f"layer {index}: empty mask")
        if attrs["classes"] < 1:
            raise NetDefError(f"layer {index}: classes must be >= 1")
    return LayerSpec(kind, index, attrs)


def parse_netdef(text) -> NetDefinition:
    """Parse definition text (a string or text stream) into a :class:`NetDefinition`."""
    if not isinstance(text, str):
        text = text.read()
    options = {}
    layers = []
    kind = None
    attrs = None
    seen_section = False

    def close():
        if kind is not None and kind != "net":
            layers.append(_finish_layer(kind, len(layers), attrs))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise NetDefError(f"line {lineno}: unterminated section header {line!r}")
            name = line[1:-1].strip().lower()
            name = _ALIASES.get(name, name)
            if name == "net" and seen_section:
                raise NetDefError(f"line {lineno}: [net] must be the first section")
            if name != "net" and name not in LAYER_KINDS:
                raise NetDefError(f"line {lineno}: unknown section kind [{name}]")
            close()
            seen_section = True
            kind, attrs = name, {}
            continue
        if "=" not in line:
            raise NetDefError(f"line {lineno}: expected key=value, got {line!r}")
        if kind is None:
            raise NetDefError(f"line {lineno}: key=value outside any section")
        key, value = (s.strip() for s in line.split("=", 1))
        if kind == "net":
            options[key] = value
        else:
            attrs[key] = _convert(key, value, len(layers), lineno)
    close()

    try:
        shape = tuple(
            int(options.get(k, d)) for k, d in (("channels", 3), ("height", 416), ("width", 416))
        )
    except ValueError as exc:
        raise NetDefError(f"[net]: bad input geometry: {exc}") from None
    if any(d < 1 for d in shape):
        raise NetDefError(f"[net]: input extents must be positive, got {shape}")
    definition = NetDefinition(shape, tuple(layers), MappingProxyType(options))
    infer_shapes(definition)
    return definition


def load_netdef(path) -> NetDefinition:
    with open(path, encoding="utf-8") as fh:
        return parse_netdef(fh.read())


def infer_shapes(definition: NetDefinition, input_shape=None) -> list:
    """Output ``(c, h, w)`` of every layer; raises NetDefError on inconsistency."""
    shapes = []
    c, h, w = input_shape or definition.input_shape

    def source(i):
        return (c, h, w) if i < 0 else shapes[i]

    for layer in definition.layers:
        i = layer.index
        prev = source(i - 1)
        if layer.kind == "convolutional":
            k, s, p = layer["size"], layer["stride"], layer.padding
            oh = conv_output_extent(prev[1], k, s, p)
            ow = conv_output_extent(prev[2], k, s, p)
            if oh is None or ow is None:
                raise NetDefError(
                    f"layer {i}: kernel {k} stride {s} pad {p} does not tile input "
                    f"{prev[1]}x{prev[2]}"
                )
            out = (layer["filters"], oh, ow)
        elif layer.kind == "shortcut":
            other = shapes[layer["from"]]
            if other != prev:
                raise NetDefError(
                    f"layer {i}: shortcut shape mismatch, expected {prev}, got {other} "
                    f"from layer {layer['from']}"
                )
            out = prev
        elif layer.kind == "route":
            parts = [shapes[j] for j in layer["layers"]]
            if len({p[1:] for p in parts}) != 1:
                raise NetDefError(
                    f"layer {i}: route inputs disagree on spatial size: "
                    + ", ".join(f"{j}:{shapes[j]}" for j in layer["layers"])
                )
            out = (sum(p[0] for p in parts),) + parts[0][1:]
        elif layer.kind == "upsample":
            f = layer["stride"]
            out = (prev[0], prev[1] * f, prev[2] * f)
        else:
            out = prev
        shapes.append(out)
    return shapes


def conv_float_count(layer: LayerSpec, in_channels: int) -> int:
    n = layer["filters"]
    per_filter = in_channels * layer["size"] * layer["size"]
    return (4 * n if layer.batch_normalize else n) + n * per_filter


def expected_float_count(definition: NetDefinition) -> int:
    """Number of float32 values a weights payload must hold for ``definition``."""
    shapes = infer_shapes(definition)
    total = 0
    for layer in definition.layers:
        if layer.kind == "convolutional":
            in_c = definition.input_shape[0] if layer.index == 0 else shapes[layer.index - 1][0]
            total += conv_float_count(layer, in_c)
    return total


@dataclass(frozen=True)
class WeightsHeader:
    major: int = 0
    minor: int = 2
    revision: int = 0
    images_seen: int = 0

    @property
    def wide_counter(self) -> bool:
        return self.major * 10 + self.minor >= 2

    @property
    def nbytes(self) -> int:
        return 12 + (8 if self.wide_counter else 4)

    def pack(self) -> bytes:
        head = struct.pack("<3i", self.major, self.minor, self.revision)
        return head + struct.pack("<Q" if self.wide_counter else "<I", self.images_seen)


def read_header(buf: bytes) -> WeightsHeader:
    if len(buf) < 12:
        raise WeightsError(
            f"weights header truncated: need at least 12 bytes, got {len(buf)}",
            expected=12, available=len(buf),
        )
    major, minor, revision = struct.unpack_from("<3i", buf, 0)
    if major not in SUPPORTED_MAJOR_VERSIONS or minor < 0:
        raise WeightsError(f"unsupported weights version {major}.{minor}.{revision}")
    wide = major * 10 + minor >= 2
    need = 20 if wide else 16
    if len(buf) < need:
        raise WeightsError(
            f"weights header truncated: need {need} bytes, got {len(buf)}",
            expected=need, available=len(buf),
        )
    (seen,) = struct.unpack_from("<Q" if wide else "<I", buf, 12)
    return WeightsHeader(major, minor, revision, seen)


@dataclass(frozen=True)
class NetworkGraph:
    """A parsed definition with every convolutional layer parameterised.

    Instances are read-only: parameter arrays are flagged non-writeable and
    the ``params`` mapping cannot be modified.
    """

    definition: NetDefinition
    params: Mapping
    shapes: tuple
    header: WeightsHeader = WeightsHeader()

    def __post_init__(self):
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        object.__setattr__(self, "shapes", tuple(tuple(s) for s in self.shapes))

    @property
    def input_shape(self):
        return self.definition.input_shape

    @property
    def layers(self):
        return self.definition.layers

    @property
    def yolo_heads(self):
        return self.definition.yolo_indices

    @property
    def n_params(self):
        return sum(p.n_params for p in self.params.values())

    @property
    def class_count(self):
        heads = self.yolo_heads
        return self.layers[heads[0]]["classes"] if heads else 0


def build_graph(definition: NetDefinition, params: Mapping, header=None, full_profile=False):
    """Validate ``params`` against ``definition`` and freeze them into a graph.

    Every detection head must be fed by a convolution whose filter count is
    ``kernel_size(len(mask), classes)``. With ``full_profile`` the network
    must additionally expose exactly three heads over nine anchors.
    """
    shapes = infer_shapes(definition)
    in_channels = [definition.input_shape[0]] + [s[0] for s in shapes[:-1]]
    for layer in definition.layers:
        i = layer.index
        if layer.kind == "convolutional":
            if i not in params:
                raise NetDefError(f"layer {i}: missing convolution parameters")
            p = params[i]
            want = (layer["filters"], in_channels[i], layer["size"], layer["size"])
            if p.weights.shape != want:
                raise NetDefError(
                    f"layer {i}: weights shape {p.weights.shape} != expected {want}"
                )
            if (p.batchnorm is not None) != layer.batch_normalize:
                raise NetDefError(f"layer {i}: batchnorm presence disagrees with definition")
        elif layer.kind == "yolo":
            feeder = definition.layers[i - 1] if i > 0 else None
            want = kernel_size(len(layer["mask"]), layer["classes"])
            if feeder is None or feeder.kind != "convolutional":
                raise NetDefError(f"layer {i}: detection head must follow a convolution")
            if feeder["filters"] != want:
                raise NetDefError(
                    f"layer {i}: head conv (layer {i - 1}) has {feeder['filters']} filters, "
                    f"expected B*(5+C) = {len(layer['mask'])}*(5+{layer['classes']}) = {want}"
                )
    if full_profile:
        heads = definition.yolo_indices
        if len(heads) != 3:
            raise NetDefError(f"full network needs exactly 3 detection heads, found {len(heads)}")
        for i in heads:
            if len(definition.layers[i]["anchors"]) != 9:
                raise NetDefError(f"layer {i}: full network needs 9 anchors")
    return NetworkGraph(definition, params, shapes, header or WeightsHeader())


def _conv_params(layer, weights, bias, bn):
    return ConvParams(
        weights=weights,
        bias=bias,
        batchnorm=bn,
        stride=layer["stride"],
        pad=layer.padding,
        activation=layer.activation,
        slope=layer.get("slope", DEFAULT_LEAKY_SLOPE),
    )


def load_weights(data, definition: NetDefinition, full_profile=False) -> NetworkGraph:
    """Read a Darknet weights payload (bytes, path-like or binary stream).

    Floats are consumed per convolutional layer in network order; the stream
    must end exactly after the last layer.
    """
    if isinstance(data, (bytes, bytearray, memoryview)):
        buf = bytes(data)
    elif hasattr(data, "read"):
        buf = data.read()
    else:
        with open(data, "rb") as fh:
            buf = fh.read()
    header = read_header(buf)
    payload = buf[header.nbytes :]
    expected = expected_float_count(definition)
    if len(payload) % 4:
        raise WeightsError(
            f"payload of {len(payload)} bytes is not a whole number of float32 values",
            expected=expected * 4, available=len(payload),
        )
    available = len(payload) // 4
    if available < expected:
        raise WeightsError(
            f"premature end of weights: expected {expected} floats, {available} available",
            expected=expected, available=available,
        )
    if available > expected:
        raise WeightsError(
            f"trailing data in weights: expected {expected} floats, {available} available",
            expected=expected, available=available,
        )
    floats = np.frombuffer(payload, dtype="<f4")

    shapes = infer_shapes(definition)
    params = {}
    pos = 0

    def take(n):
        nonlocal pos
        out = floats[pos : pos + n].astype(np.float32)
        pos += n
        return out

    for layer in definition.layers:
        if layer.kind != "convolutional":
            continue
        i = layer.index
        n = layer["filters"]
        c = definition.input_shape[0] if i == 0 else shapes[i - 1][0]
        k = layer["size"]
        if layer.batch_normalize:
            beta, gamma, mean, var = take(n), take(n), take(n), take(n)
            bn = BatchNorm(gamma=gamma, beta=beta, rolling_mean=mean, rolling_var=var)
            bias = np.zeros(n, np.float32)
        else:
            bias, bn = take(n), None
        weights = take(n * c * k * k).reshape(n, c, k, k)
        params[i] = _conv_params(layer, weights, bias, bn)
    return build_graph(definition, params, header, full_profile=full_profile)


def serialize_weights(graph: NetworkGraph, header: Optional[WeightsHeader] = None) -> bytes:
    """Encode ``graph`` parameters in the Darknet weights layout."""
    out = io.BytesIO()
    out.write((header or graph.header).pack())
    for layer in graph.layers:
        if layer.kind != "convolutional":
            continue
        p = graph.params[layer.index]
        if p.batchnorm is not None:
            bn = p.batchnorm
            chunks = [bn.beta, bn.gamma, bn.rolling_mean, bn.rolling_var]
        else:
            chunks = [p.bias]
        for chunk in chunks + [p.weights.ravel()]:
            out.write(np.asarray(chunk, dtype="<f4").tobytes())
    return out.getvalue()


def init_params(definition: NetDefinition, rng=None, scale=0.1) -> dict:
    """Random parameters matching ``definition``, for synthetic graphs and tests."""
    rng = np.random.default_rng(rng)
    shapes = infer_shapes(definition)
    params = {}
    for layer in definition.layers:
        if layer.kind != "convolutional":
            continue
        i = layer.index
        n, k = layer["filters"], layer["size"]
        c = definition.input_shape[0] if i == 0 else shapes[i - 1][0]
        fan_in = c * k * k
        weights = rng.normal(0.0, scale / np.sqrt(fan_in), (n, c, k, k)).astype(np.float32)
        if layer.batch_normalize:
            bn = BatchNorm(
                gamma=rng.uniform(0.5, 1.5, n),
                beta=rng.normal(0.0, 0.1, n),
                rolling_mean=rng.normal(0.0, 0.1, n),
                rolling_var=rng.uniform(0.5, 1.5, n),
            )
            bias = np.zeros(n, np.float32)
        else:
            bn, bias = None, rng.normal(0.0, 0.1, n)
        params[i] = _conv_params(layer, weights, bias, bn)
    return params
