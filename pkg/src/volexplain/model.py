"""Declarative 3D CNN classifiers: specs, shape inference, forward/backward.

A :class:`NetworkSpec` is an ordered list of layer descriptors. A
:class:`Network` pairs a spec with its parameters; it is never modified in
place (parameter arrays are read-only), so it can be shared freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import core
from .errors import LabelError, ShapeError, SpecError

DEFAULT_CLASS_NAMES = ("CN", "MCI", "AD")

Triple = Union[int, tuple[int, int, int]]


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise SpecError(f"expected 3 spatial values, got {v!r}")
    return t


@dataclass(frozen=True)
class Conv3D:
    out_channels: int
    kernel: Triple = 3
    stride: Triple = 1
    pad: Triple = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "pad", _triple(self.pad))
        if self.out_channels < 1 or min(self.kernel) < 1 or min(self.stride) < 1 or min(self.pad) < 0:
            raise SpecError(f"invalid Conv3D parameters: {self}")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool3D:
    window: Triple = 2
    stride: Optional[Triple] = None

    def __post_init__(self):
        object.__setattr__(self, "window", _triple(self.window))
        stride = self.window if self.stride is None else self.stride
        object.__setattr__(self, "stride", _triple(stride))
        if min(self.window) < 1 or min(self.stride) < 1:
            raise SpecError(f"invalid MaxPool3D parameters: {self}")


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int

    def __post_init__(self):
        if self.out_features < 1:
            raise SpecError(f"invalid Dense parameters: {self}")


Layer = Union[Conv3D, ReLU, MaxPool3D, Flatten, Dense]


@dataclass(frozen=True)
class LayerShape:
    index: int
    layer: Layer
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]


def _layer_label(i: int, layer) -> str:
    return f"layer {i} ({type(layer).__name__})"


def _infer(layers, input_shape) -> list[LayerShape]:
    if not layers:
        raise SpecError("network has no layers")
    table = []
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        try:
            if isinstance(layer, Conv3D):
                if len(shape) != 4:
                    raise SpecError(f"expects (channels, d, h, w) input, got {shape}")
                out = tuple(
                    core.output_extent(n, k, s, p, ax)
                    for n, k, s, p, ax in zip(shape[1:], layer.kernel, layer.stride, layer.pad, core._AXES)
                )
                new = (layer.out_channels, *out)
            elif isinstance(layer, MaxPool3D):
                if len(shape) != 4:
                    raise SpecError(f"expects (channels, d, h, w) input, got {shape}")
                out = tuple(
                    core.output_extent(n, k, s, 0, ax)
                    for n, k, s, ax in zip(shape[1:], layer.window, layer.stride, core._AXES)
                )
                new = (shape[0], *out)
            elif isinstance(layer, ReLU):
                new = shape
            elif isinstance(layer, Flatten):
                new = (math.prod(shape),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise SpecError(f"expects flat input, got {shape}; insert Flatten first")
                new = (layer.out_features,)
            else:
                raise SpecError(f"unsupported layer type {type(layer).__name__}")
        except (SpecError, ShapeError) as exc:
            raise SpecError(f"{_layer_label(i, layer)}: {exc}") from None
        table.append(LayerShape(i, layer, shape, new))
        shape = new
    return table


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple[int, ...]
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(self.input_shape) not in (1, 4) or min(self.input_shape, default=0) < 1:
            raise SpecError(f"input_shape must be (channels, d, h, w) or (features,), got {self.input_shape}")
        if len(self.class_names) < 2:
            raise SpecError("at least two class names are required")
        if len(set(self.class_names)) != len(self.class_names):
            raise SpecError(f"class names must be unique: {self.class_names}")
        table = _infer(self.layers, self.input_shape)
        last = self.layers[-1]
        if not isinstance(last, Dense) or last.out_features != len(self.class_names):
            raise SpecError(
                f"final layer must be Dense({len(self.class_names)}) to match class_names, got {last}"
            )
        object.__setattr__(self, "_table", table)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_index(self, name_or_index) -> int:
        if isinstance(name_or_index, str) and not name_or_index.lstrip("-").isdigit():
            if name_or_index not in self.class_names:
                raise LabelError(f"unknown class {name_or_index!r}; expected one of {list(self.class_names)}")
            return self.class_names.index(name_or_index)
        idx = int(name_or_index)
        if not 0 <= idx < self.num_classes:
            raise LabelError(f"class index {idx} out of range [0, {self.num_classes})")
        return idx


def infer_shapes(spec_or_layers, input_shape=None) -> list[LayerShape]:
    """Per-layer input/output shapes (batch axis omitted).

    Accepts either a :class:`NetworkSpec` or a raw layer list plus input
    shape; the latter is useful for checking partial stacks.
    """
    if isinstance(spec_or_layers, NetworkSpec):
        return list(spec_or_layers._table)
    return _infer(list(spec_or_layers), input_shape)


def default_spec(input_shape=(1, 16, 16, 16), class_names=DEFAULT_CLASS_NAMES) -> NetworkSpec:
    """Three conv/ReLU/pool stages and a two-layer dense head."""
    return NetworkSpec(
        layers=(
            Conv3D(8, 3, 1, 1), ReLU(), MaxPool3D(2, 2),
            Conv3D(16, 3, 1, 1), ReLU(), MaxPool3D(2, 2),
            Conv3D(32, 3, 1, 1), ReLU(), MaxPool3D(2, 2),
            Flatten(), Dense(64), ReLU(), Dense(len(class_names)),
        ),
        input_shape=input_shape,
        class_names=class_names,
    )


# ---------------------------------------------------------------------------
# parameters


def param_shapes(spec: NetworkSpec) -> list[dict[str, tuple[int, ...]]]:
    """Parameter names and shapes per layer, in storage order."""
    out = []
    for row in infer_shapes(spec):
        layer = row.layer
        if isinstance(layer, Conv3D):
            c = row.input_shape[0]
            out.append({"kernels": (layer.out_channels, c, *layer.kernel), "bias": (layer.out_channels,)})
        elif isinstance(layer, Dense):
            out.append({"weights": (layer.out_features, row.input_shape[0]), "bias": (layer.out_features,)})
        else:
            out.append({})
    return out


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Network:
    spec: NetworkSpec
    params: tuple = field(repr=False)

    def __post_init__(self):
        expected = param_shapes(self.spec)
        params = tuple(dict(p) for p in self.params)
        if len(params) != len(expected):
            raise SpecError(f"expected parameters for {len(expected)} layers, got {len(params)}")
        frozen = []
        for i, (got, want) in enumerate(zip(params, expected)):
            if set(got) != set(want):
                raise SpecError(f"layer {i}: parameter names {sorted(got)} != {sorted(want)}")
            layer_params = {}
            for name, shape in want.items():
                arr = np.asarray(got[name], dtype=np.float64)
                if arr.shape != shape:
                    raise SpecError(f"layer {i} {name}: shape {arr.shape} != {shape}")
                core.check_finite(arr, f"layer {i} {name}")
                layer_params[name] = _freeze(arr)
            frozen.append(layer_params)
        object.__setattr__(self, "params", tuple(frozen))

    @property
    def num_parameters(self) -> int:
        return sum(a.size for p in self.params for a in p.values())

    def replace_params(self, params) -> "Network":
        return Network(self.spec, params)


def init_network(spec: NetworkSpec, rng_seed: int = 0) -> Network:
    """Fan-in scaled uniform weights (variance 2 / fan_in), zero biases."""
    rng = np.random.default_rng(rng_seed)
    params = []
    for shapes in param_shapes(spec):
        layer = {}
        for name, shape in shapes.items():
            if name == "bias":
                layer[name] = np.zeros(shape)
            else:
                fan_in = math.prod(shape[1:])
                bound = math.sqrt(6.0 / fan_in)
                layer[name] = rng.uniform(-bound, bound, size=shape)
        params.append(layer)
    return Network(spec, params)


def zero_network(spec: NetworkSpec) -> Network:
    return Network(spec, [{k: np.zeros(s) for k, s in p.items()} for p in param_shapes(spec)])


# ---------------------------------------------------------------------------
# execution


@dataclass
class ActivationTrace:
    """Inputs and outputs of every layer for one forward pass.

    ``inputs[i]`` is what layer ``i`` consumed (its pre-activation for a
    ReLU), ``outputs[i]`` what it produced; ``argmax`` maps pooling layer
    indices to their winner maps.
    """

    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    argmax: dict = field(default_factory=dict)


def _conv_params(layer: Conv3D, p) -> core.ConvParams:
    return core.ConvParams(p["kernels"], p["bias"], layer.stride, layer.pad)


def _as_batch(spec: NetworkSpec, x) -> np.ndarray:
    x = core.as_tensor(x, "input")
    if x.shape == spec.input_shape:
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match network input {spec.input_shape} (plus batch axis)")
    return x


def forward(net: Network, x) -> tuple[np.ndarray, ActivationTrace]:
    """Logits of shape (batch, classes) and the activation trace.

    ``x`` is a batch ``(b, *input_shape)`` or a single unbatched volume.
    """
    h = _as_batch(net.spec, x)
    trace = ActivationTrace()
    for i, (layer, p) in enumerate(zip(net.spec.layers, net.params)):
        trace.inputs.append(h)
        if isinstance(layer, Conv3D):
            h = core.conv3d_forward(h, _conv_params(layer, p))
        elif isinstance(layer, ReLU):
            h = core.relu_forward(h)
        elif isinstance(layer, MaxPool3D):
            h, trace.argmax[i] = core.maxpool3d_forward(h, core.PoolParams(layer.window, layer.stride))
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Dense):
            h = core.dense_forward(h, p["weights"], p["bias"])
        trace.outputs.append(h)
    return h, trace


def logits(net: Network, x) -> np.ndarray:
    return forward(net, x)[0]


BackwardHook = Callable[[int, Layer, np.ndarray], None]


def backward(
    net: Network,
    trace: ActivationTrace,
    grad_logits,
    *,
    relu_rule: str = "gradient",
    param_grads: bool = True,
    hook: Optional[BackwardHook] = None,
):
    """Reverse pass through a traced forward call.

    ``relu_rule="guided"`` additionally zeroes negative incoming gradients
    at every ReLU. ``hook(i, layer, grad)`` sees the gradient leaving each
    layer towards its input. Returns ``(grad_input, grads)`` where ``grads``
    mirrors ``net.params`` (empty dicts when ``param_grads`` is false).
    """
    if relu_rule not in ("gradient", "guided"):
        raise ValueError(f"unknown relu_rule {relu_rule!r}")
    g = core.as_tensor(grad_logits, "grad_logits")
    if g.shape != trace.outputs[-1].shape:
        raise ShapeError(f"grad_logits shape {g.shape} != logits shape {trace.outputs[-1].shape}")
    grads = [{} for _ in net.params]
    for i in range(len(net.spec.layers) - 1, -1, -1):
        layer, p, x = net.spec.layers[i], net.params[i], trace.inputs[i]
        if isinstance(layer, Conv3D):
            g, gk, gb = core.conv3d_backward(x, _conv_params(layer, p), g)
            if param_grads:
                grads[i] = {"kernels": gk, "bias": gb}
        elif isinstance(layer, ReLU):
            if relu_rule == "guided":
                g = np.where(g > 0, g, 0.0)
            g = core.relu_backward(x, g)
        elif isinstance(layer, MaxPool3D):
            g = core.maxpool3d_backward(trace.argmax[i], g, x.shape)
        elif isinstance(layer, Flatten):
            g = g.reshape(x.shape)
        elif isinstance(layer, Dense):
            g, gw, gb = core.dense_backward(x, p["weights"], g)
            if param_grads:
                grads[i] = {"weights": gw, "bias": gb}
        if hook is not None:
            hook(i, layer, g)
    return g, grads


def predict(net: Network, volume) -> tuple[int, str, np.ndarray]:
    """Class index, class name and softmax probabilities for one volume.

    Ties resolve to the smallest class index.
    """
    z, _ = forward(net, volume)
    if z.shape[0] != 1:
        raise ShapeError(f"predict takes a single volume, got a batch of {z.shape[0]}")
    probs = core.softmax(z)[0]
    idx = int(np.argmax(z[0]))
    return idx, net.spec.class_names[idx], probs


# ---------------------------------------------------------------------------
# serialization of specs


def layer_to_dict(layer) -> dict:
    d = {"type": type(layer).__name__}
    if isinstance(layer, Conv3D):
        d.update(out_channels=layer.out_channels, kernel=list(layer.kernel), stride=list(layer.stride), pad=list(layer.pad))
    elif isinstance(layer, MaxPool3D):
        d.update(window=list(layer.window), stride=list(layer.stride))
    elif isinstance(layer, Dense):
        d.update(out_features=layer.out_features)
    return d


_LAYER_TYPES = {cls.__name__: cls for cls in (Conv3D, ReLU, MaxPool3D, Flatten, Dense)}


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in _LAYER_TYPES:
        raise SpecError(f"unknown layer type {kind!r}")
    try:
        return _LAYER_TYPES[kind](**d)
    except TypeError as exc:
        raise SpecError(f"{kind}: {exc}") from None


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "input_shape": list(spec.input_shape),
        "class_names": list(spec.class_names),
        "layers": [layer_to_dict(l) for l in spec.layers],
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    try:
        return NetworkSpec(
            layers=[layer_from_dict(l) for l in d["layers"]],
            input_shape=d["input_shape"],
            class_names=d["class_names"],
        )
    except KeyError as exc:
        raise SpecError(f"spec is missing field {exc}") from None


# Text grammar, one directive per line ('#' starts a comment):
#
#   input C D H W          (or: input N  for flat inputs)
#   classes NAME NAME ...
#   conv OUT [kernel=K] [stride=S] [pad=P]
#   relu
#   pool [W] [stride=S]
#   flatten
#   dense OUT
#
# K, S, P, W are a single integer or three joined by 'x' (e.g. 3x3x1).


def _parse_triple(text: str, lineno: int) -> tuple[int, int, int]:
    parts = text.split("x")
    try:
        values = [int(v) for v in parts]
    except ValueError:
        raise SpecError(f"line {lineno}: expected an integer or AxBxC, got {text!r}") from None
    if len(values) == 1:
        return (values[0],) * 3
    if len(values) == 3:
        return tuple(values)
    raise SpecError(f"line {lineno}: expected 1 or 3 extents, got {text!r}")


def _fmt_triple(t) -> str:
    return str(t[0]) if len(set(t)) == 1 else "x".join(str(v) for v in t)


def parse_spec(text: str) -> NetworkSpec:
    input_shape = None
    class_names = DEFAULT_CLASS_NAMES
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *args = line.split()
        word = word.lower()
        positional = [a for a in args if "=" not in a]
        opts = dict(a.split("=", 1) for a in args if "=" in a)
        try:
            if word == "input":
                input_shape = tuple(int(a) for a in positional)
            elif word == "classes":
                class_names = tuple(positional)
            elif word == "conv":
                allowed = {"kernel", "stride", "pad"}
                if set(opts) - allowed or len(positional) != 1:
                    raise SpecError("usage: conv OUT [kernel=K] [stride=S] [pad=P]")
                layers.append(Conv3D(
                    int(positional[0]),
                    _parse_triple(opts.get("kernel", "3"), lineno),
                    _parse_triple(opts.get("stride", "1"), lineno),
                    _parse_triple(opts.get("pad", "0"), lineno),
                ))
            elif word == "pool":
                if set(opts) - {"stride"} or len(positional) > 1:
                    raise SpecError("usage: pool [W] [stride=S]")
                window = _parse_triple(positional[0] if positional else "2", lineno)
                stride = _parse_triple(opts["stride"], lineno) if "stride" in opts else None
                layers.append(MaxPool3D(window, stride))
            elif word in ("relu", "flatten"):
                if args:
                    raise SpecError(f"{word} takes no arguments")
                layers.append(ReLU() if word == "relu" else Flatten())
            elif word == "dense":
                if opts or len(positional) != 1:
                    raise SpecError("usage: dense OUT")
                layers.append(Dense(int(positional[0])))
            else:
                raise SpecError(f"unknown directive {word!r}")
        except ValueError as exc:
            if isinstance(exc, SpecError) and str(exc).startswith("line "):
                raise
            raise SpecError(f"line {lineno}: {exc}") from None
    if input_shape is None:
        raise SpecError("missing 'input' directive")
    return NetworkSpec(layers, input_shape, class_names)


def format_spec(spec: NetworkSpec) -> str:
    lines = [
        "input " + " ".join(str(n) for n in spec.input_shape),
        "classes " + " ".join(spec.class_names),
    ]
    for layer in spec.layers:
        if isinstance(layer, Conv3D):
            lines.append(
                f"conv {layer.out_channels} kernel={_fmt_triple(layer.kernel)} "
                f"stride={_fmt_triple(layer.stride)} pad={_fmt_triple(layer.pad)}"
            )
        elif isinstance(layer, MaxPool3D):
            lines.append(f"pool {_fmt_triple(layer.window)} stride={_fmt_triple(layer.stride)}")
        elif isinstance(layer, Dense):
            lines.append(f"dense {layer.out_features}")
        else:
            lines.append(type(layer).__name__.lower())
    return "\n".join(lines) + "\n"
