"""Relevance maps over the input volume.

Five methods are provided, all targeting the pre-softmax logit of one
class:

* ``sensitivity``       gradient of the logit w.r.t. each voxel
* ``guided``            guided backpropagation
* ``occlusion``         logit drop when a sliding cube is filled with a baseline
* ``region-occlusion``  logit drop when a whole atlas region is filled
* ``lrp``               layer-wise relevance propagation (epsilon / z+ rules)

Maps keep their sign. For multi-channel inputs the per-channel values are
summed into a single spatial map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import core
from .errors import AtlasError, ShapeError
from .model import (
    Conv3D,
    Dense,
    Flatten,
    MaxPool3D,
    Network,
    ReLU,
    backward,
    forward,
)

SENSITIVITY = "sensitivity"
GUIDED = "guided"
OCCLUSION = "occlusion"
REGION_OCCLUSION = "region-occlusion"
LRP = "lrp"
METHODS = (SENSITIVITY, GUIDED, OCCLUSION, REGION_OCCLUSION, LRP)

LRP_RULES = ("epsilon", "zplus")


@dataclass
class AttributionMap:
    values: np.ndarray
    method: str
    target_class: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        self.values = core.as_tensor(self.values, "attribution values")
        if self.values.ndim != 3:
            raise ShapeError(f"attribution values must be 3-D, got {self.values.shape}")

    @property
    def abs(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def positive(self) -> np.ndarray:
        return np.maximum(self.values, 0.0)


# ---------------------------------------------------------------------------
# helpers


def _prepare(net: Network, volume, target_class) -> tuple[np.ndarray, int]:
    shape = net.spec.input_shape
    if len(shape) != 4:
        raise ShapeError("attribution needs a volumetric network input (channels, d, h, w)")
    v = core.as_tensor(volume, "volume")
    if v.shape == shape[1:] and shape[0] == 1:
        v = v[None]
    if v.shape != shape:
        raise ShapeError(f"volume shape {v.shape} does not match network input {shape}")
    t = net.spec.class_index(target_class)
    return v, t


def _target_logit(net: Network, batch: np.ndarray, t: int) -> np.ndarray:
    return forward(net, batch)[0][:, t]


def _spatial(per_channel: np.ndarray) -> np.ndarray:
    return per_channel.sum(axis=0) if per_channel.shape[0] > 1 else per_channel[0].copy()


def _gradient(net: Network, v: np.ndarray, t: int, relu_rule: str, hook=None) -> np.ndarray:
    z, trace = forward(net, v[None])
    seed = np.zeros_like(z)
    seed[0, t] = 1.0
    g, _ = backward(net, trace, seed, relu_rule=relu_rule, param_grads=False, hook=hook)
    return g[0]


# ---------------------------------------------------------------------------
# gradient methods


def sensitivity_map(net: Network, volume, target_class) -> AttributionMap:
    v, t = _prepare(net, volume, target_class)
    g = _gradient(net, v, t, "gradient")
    return AttributionMap(_spatial(g), SENSITIVITY, t, {"score": "logit"})


def guided_backprop_map(net: Network, volume, target_class, *, gating: bool = True, hook=None) -> AttributionMap:
    """Guided backpropagation.

    With ``gating=False`` the ReLU rule falls back to the plain gradient,
    which reproduces :func:`sensitivity_map`. ``hook(i, layer, grad)`` is
    forwarded to :func:`volexplain.model.backward`.
    """
    v, t = _prepare(net, volume, target_class)
    g = _gradient(net, v, t, "guided" if gating else "gradient", hook)
    return AttributionMap(_spatial(g), GUIDED, t, {"score": "logit", "gating": gating})


# ---------------------------------------------------------------------------
# occlusion


def occlusion_starts(extent: int, patch: int, stride: int) -> list[int]:
    """Patch start offsets along one axis.

    Offsets step by ``stride``; the last one is clamped to
    ``extent - patch`` so the patches reach the far boundary.
    """
    if patch < 1 or stride < 1:
        raise ValueError(f"patch and stride must be >= 1, got {patch}, {stride}")
    if patch > extent:
        raise ShapeError(f"patch {patch} larger than volume extent {extent}")
    if stride > patch:
        raise ValueError(f"stride {stride} > patch {patch} would leave voxels uncovered")
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def occlusion_grid(spatial_shape, patch, stride) -> list[tuple[int, int, int]]:
    patch = core._triple(patch, "patch")
    stride = core._triple(stride, "stride")
    axes = [occlusion_starts(n, p, s) for n, p, s in zip(spatial_shape, patch, stride)]
    return [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]


def occlusion_coverage(spatial_shape, patch, stride) -> np.ndarray:
    """Number of patches covering each voxel."""
    patch = core._triple(patch, "patch")
    count = np.zeros(tuple(spatial_shape), dtype=np.int64)
    for a, b, c in occlusion_grid(spatial_shape, patch, stride):
        count[a : a + patch[0], b : b + patch[1], c : c + patch[2]] += 1
    return count


def _batched_logits(net, volumes_iter, t, total, batch_size):
    out = np.empty(total)
    buf = []
    pos = 0
    for vol in volumes_iter:
        buf.append(vol)
        if len(buf) == batch_size:
            out[pos : pos + len(buf)] = _target_logit(net, np.stack(buf), t)
            pos += len(buf)
            buf = []
    if buf:
        out[pos : pos + len(buf)] = _target_logit(net, np.stack(buf), t)
    return out


def occlusion_map(
    net: Network,
    volume,
    target_class,
    patch=4,
    stride=2,
    baseline: float = 0.0,
    *,
    batch_size: int = 32,
) -> AttributionMap:
    """Sliding-cube occlusion.

    Each patch on the stride grid is filled with ``baseline`` (all
    channels) and the drop ``logit(x) - logit(occluded)`` is recorded.
    Every voxel receives the mean drop over the patches covering it;
    patches are accumulated in grid order.
    """
    v, t = _prepare(net, volume, target_class)
    patch = core._triple(patch, "patch")
    stride = core._triple(stride, "stride")
    spatial = v.shape[1:]
    grid = occlusion_grid(spatial, patch, stride)
    base = _target_logit(net, v[None], t)[0]

    def occluded():
        for a, b, c in grid:
            o = v.copy()
            o[:, a : a + patch[0], b : b + patch[1], c : c + patch[2]] = baseline
            yield o

    occ = _batched_logits(net, occluded(), t, len(grid), batch_size)
    total = np.zeros(spatial)
    count = np.zeros(spatial)
    for (a, b, c), value in zip(grid, occ):
        sl = (slice(a, a + patch[0]), slice(b, b + patch[1]), slice(c, c + patch[2]))
        total[sl] += base - value
        count[sl] += 1
    assert count.min() >= 1, "occlusion grid left voxels uncovered"
    meta = {"patch": list(patch), "stride": list(stride), "baseline": float(baseline), "positions": len(grid), "score": "logit"}
    return AttributionMap(total / count, OCCLUSION, t, meta)


def region_occlusion_map(net: Network, volume, target_class, atlas, baseline: float = 0.0) -> AttributionMap:
    """Occlude one atlas region at a time; background (label 0) stays 0."""
    v, t = _prepare(net, volume, target_class)
    labels = np.asarray(getattr(atlas, "labels", atlas))
    if labels.shape != v.shape[1:]:
        raise ShapeError(f"atlas shape {labels.shape} does not match volume shape {v.shape[1:]}")
    regions = [int(r) for r in np.unique(labels) if r != 0]
    if not regions:
        raise AtlasError("atlas has no non-background region")
    base = _target_logit(net, v[None], t)[0]
    values = np.zeros(v.shape[1:])
    deltas = {}
    for r in regions:
        mask = labels == r
        o = v.copy()
        o[:, mask] = baseline
        deltas[r] = base - _target_logit(net, o[None], t)[0]
        values[mask] = deltas[r]
    meta = {"baseline": float(baseline), "regions": len(regions), "score": "logit"}
    return AttributionMap(values, REGION_OCCLUSION, t, meta)


# ---------------------------------------------------------------------------
# layer-wise relevance propagation


def _safe_divide(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def _lrp_affine(layer, p, x, z, R, rule: str, eps: float) -> np.ndarray:
    """Relevance of a Dense/Conv3D layer's inputs given that of its outputs."""
    if isinstance(layer, Conv3D):
        def fwd(inp, w, b):
            return core.conv3d_forward(inp, core.ConvParams(w, b, layer.stride, layer.pad))

        def vjp(inp, w, s):
            return core.conv3d_backward(inp, core.ConvParams(w, np.zeros(w.shape[0]), layer.stride, layer.pad), s)[0]

        w, b = p["kernels"], p["bias"]
    else:
        def fwd(inp, w, b):
            return core.dense_forward(inp, w, b)

        def vjp(inp, w, s):
            return core.dense_backward(inp, w, s)[0]

        w, b = p["weights"], p["bias"]

    if rule == "epsilon":
        den = z + eps * np.where(z >= 0, 1.0, -1.0)
        s = _safe_divide(R, den)
        return x * vjp(x, w, s)

    xp, xn = np.maximum(x, 0.0), np.minimum(x, 0.0)
    wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
    zero_b = np.zeros_like(b)
    den = fwd(xp, wp, zero_b) + fwd(xn, wn, zero_b) + np.maximum(b, 0.0)[(...,) + (None,) * (z.ndim - 2)] + eps
    s = _safe_divide(R, den)
    return xp * vjp(xp, wp, s) + xn * vjp(xn, wn, s)


def lrp_relevance(net: Network, volume, target_class, rule: str = "epsilon", epsilon: float = 1e-6, hook=None):
    """Per-channel input relevance (and the target logit it started from).

    ``hook(i, layer, R)`` sees the relevance arriving at each layer's input.
    """
    if rule not in LRP_RULES:
        raise ValueError(f"unknown LRP rule {rule!r}; expected one of {LRP_RULES}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    v, t = _prepare(net, volume, target_class)
    z, trace = forward(net, v[None])
    R = np.zeros_like(z)
    R[0, t] = z[0, t]
    for i in range(len(net.spec.layers) - 1, -1, -1):
        layer, x = net.spec.layers[i], trace.inputs[i]
        if isinstance(layer, (Conv3D, Dense)):
            R = _lrp_affine(layer, net.params[i], x, trace.outputs[i], R, rule, epsilon)
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, MaxPool3D):
            R = core.maxpool3d_backward(trace.argmax[i], R, x.shape)
        elif isinstance(layer, Flatten):
            R = R.reshape(x.shape)
        else:
            raise ValueError(f"layer {i}: LRP does not support {type(layer).__name__}")
        if hook is not None:
            hook(i, layer, R)
    return R[0], float(z[0, t])


def lrp_map(net: Network, volume, target_class, rule: str = "epsilon", epsilon: float = 1e-6) -> AttributionMap:
    R, logit = lrp_relevance(net, volume, target_class, rule, epsilon)
    t = net.spec.class_index(target_class)
    return AttributionMap(_spatial(R), LRP, t, {"rule": rule, "epsilon": float(epsilon), "score": "logit", "logit": logit})


# ---------------------------------------------------------------------------


def compute_map(net: Network, volume, method: str, target_class, **options) -> AttributionMap:
    """Dispatch on a method name from :data:`METHODS`."""
    if method == SENSITIVITY:
        return sensitivity_map(net, volume, target_class)
    if method == GUIDED:
        return guided_backprop_map(net, volume, target_class)
    if method == OCCLUSION:
        return occlusion_map(net, volume, target_class, **options)
    if method == REGION_OCCLUSION:
        return region_occlusion_map(net, volume, target_class, **options)
    if method == LRP:
        return lrp_map(net, volume, target_class, **options)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def average_maps(maps: Sequence[AttributionMap]) -> AttributionMap:
    """Elementwise mean of maps sharing shape, method and target class."""
    maps = list(maps)
    if not maps:
        raise ValueError("average_maps needs at least one map")
    first = maps[0]
    for m in maps[1:]:
        if m.values.shape != first.values.shape:
            raise ShapeError(f"map shapes differ: {first.values.shape} vs {m.values.shape}")
        if m.method != first.method or m.target_class != first.target_class:
            raise ValueError(
                f"cannot average {m.method}/class {m.target_class} with {first.method}/class {first.target_class}"
            )
    total = np.zeros_like(first.values)
    for m in maps:
        total += m.values
    meta = {k: v for k, v in first.metadata.items() if all(m.metadata.get(k) == v for m in maps)}
    meta["count"] = len(maps)
    return AttributionMap(total / len(maps), first.method, first.target_class, meta)
