import itertools

import numpy as np
import pytest

from volexplain.attribution import (
    AttributionMap,
    average_maps,
    compute_map,
    guided_backprop_map,
    lrp_map,
    lrp_relevance,
    occlusion_coverage,
    occlusion_grid,
    occlusion_map,
    region_occlusion_map,
    sensitivity_map,
)
from volexplain.errors import AtlasError, LabelError, ShapeError
from volexplain.model import (
    Conv3D,
    Dense,
    Flatten,
    MaxPool3D,
    Network,
    NetworkSpec,
    ReLU,
    default_spec,
    forward,
    init_network,
    zero_network,
)

from oracles import central_difference


def tiny_spec(side=6):
    return NetworkSpec(
        [Conv3D(2, 3, 1, 1), ReLU(), MaxPool3D(2), Conv3D(3, 3, 1, 1), ReLU(), Flatten(), Dense(4), ReLU(), Dense(3)],
        (1, side, side, side),
    )


def with_random_biases(net, seed, scale=0.1):
    rng = np.random.default_rng(seed)
    params = [{k: (rng.normal(scale=scale, size=v.shape) if k == "bias" else v) for k, v in p.items()} for p in net.params]
    return net.replace_params(params)


def target_logit(net, vol, t):
    return forward(net, vol[None])[0][0, t]


@pytest.fixture
def rng():
    return np.random.default_rng(77)


# -- sensitivity ------------------------------------------------------------------


def test_sensitivity_zero_network():
    m = sensitivity_map(zero_network(default_spec()), np.ones((1, 16, 16, 16)), 2)
    assert m.values.shape == (16, 16, 16)
    assert not m.values.any()


def test_sensitivity_linear_model(rng):
    spec = NetworkSpec([Flatten(), Dense(3)], (1, 4, 5, 3))
    w = rng.normal(size=(3, 60))
    net = Network(spec, [{}, {"weights": w, "bias": rng.normal(size=3)}])
    m = sensitivity_map(net, rng.normal(size=(4, 5, 3)), "MCI")
    assert m.target_class == 1
    np.testing.assert_array_equal(m.values, w[1].reshape(4, 5, 3))


def test_sensitivity_matches_voxel_perturbation(rng):
    net = with_random_biases(init_network(default_spec(), 5), 1)
    vol = rng.normal(size=(1, 16, 16, 16))
    m = sensitivity_map(net, vol, 2)
    f = lambda v: target_logit(net, v, 2)
    flat = rng.choice(vol.size, size=20, replace=False)
    idx = [np.unravel_index(i, vol.shape) for i in flat]
    numeric = np.array([central_difference(f, vol, i) for i in idx])
    analytic = np.array([m.values[i[1:]] for i in idx])
    assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(numeric)


def test_class_out_of_range():
    net = init_network(tiny_spec(), 0)
    with pytest.raises(LabelError):
        sensitivity_map(net, np.zeros((6, 6, 6)), 3)
    with pytest.raises(LabelError):
        lrp_map(net, np.zeros((6, 6, 6)), "XYZ")


def test_volume_shape_mismatch():
    with pytest.raises(ShapeError):
        sensitivity_map(init_network(tiny_spec(), 0), np.zeros((5, 6, 6)), 0)


# -- guided backprop -------------------------------------------------------------


def test_guided_without_relu_equals_sensitivity(rng):
    spec = NetworkSpec([Conv3D(2, 3, 1, 1), MaxPool3D(2), Flatten(), Dense(3)], (1, 6, 6, 6))
    net = with_random_biases(init_network(spec, 3), 2)
    vol = rng.normal(size=(6, 6, 6))
    assert guided_backprop_map(net, vol, 0).values.tobytes() == sensitivity_map(net, vol, 0).values.tobytes()


def test_guided_zero_volume_relu_first():
    spec = NetworkSpec([ReLU(), Conv3D(2, 3, 1, 1), ReLU(), Flatten(), Dense(3)], (1, 4, 4, 4))
    net = init_network(spec, 0)
    assert not guided_backprop_map(net, np.zeros((4, 4, 4)), 1).values.any()


def test_guided_toggle_and_nonnegativity(rng):
    net = with_random_biases(init_network(tiny_spec(), 8), 3)
    vol = rng.normal(size=(6, 6, 6))
    plain = guided_backprop_map(net, vol, 2, gating=False)
    assert plain.values.tobytes() == sensitivity_map(net, vol, 2).values.tobytes()

    seen = []

    def hook(i, layer, g):
        if isinstance(layer, ReLU):
            seen.append(g.copy())

    guided = guided_backprop_map(net, vol, 2, hook=hook)
    assert len(seen) == 3
    assert all(g.min() >= 0 for g in seen)
    assert not np.array_equal(guided.values, plain.values)


# -- occlusion ---------------------------------------------------------------------


def test_occlusion_whole_volume_patch(rng):
    net = with_random_biases(init_network(tiny_spec(), 1), 4)
    vol = rng.normal(size=(6, 6, 6))
    m = occlusion_map(net, vol, 1, patch=6, stride=1, baseline=0.5)
    expected = target_logit(net, vol[None], 1) - target_logit(net, np.full((1, 6, 6, 6), 0.5), 1)
    np.testing.assert_array_equal(m.values, np.full((6, 6, 6), expected))


def test_occlusion_zero_network(rng):
    m = occlusion_map(zero_network(tiny_spec()), rng.normal(size=(6, 6, 6)), 0, 2, 1)
    assert not m.values.any()


def test_occlusion_exhaustive_single_voxel(rng):
    net = with_random_biases(init_network(tiny_spec(), 2), 5)
    vol = rng.normal(size=(1, 6, 6, 6))
    m = occlusion_map(net, vol, 2, patch=1, stride=1, baseline=0.0)
    base = target_logit(net, vol, 2)
    expected = np.zeros((6, 6, 6))
    for d, h, w in itertools.product(range(6), repeat=3):
        o = vol.copy()
        o[0, d, h, w] = 0.0
        expected[d, h, w] = base - target_logit(net, o, 2)
    assert m.values.tobytes() == expected.tobytes()


@pytest.mark.parametrize("shape", [(6, 6, 6), (16, 16, 16), (7, 9, 5)])
@pytest.mark.parametrize("patch,stride", [(1, 1), (2, 1), (2, 2), (3, 2), (4, 2), (4, 3), (5, 5)])
def test_occlusion_grid_covers_every_voxel(shape, patch, stride):
    if patch > min(shape):
        pytest.skip("patch larger than volume")
    assert occlusion_coverage(shape, patch, stride).min() >= 1
    for start in occlusion_grid(shape, patch, stride):
        assert all(0 <= s <= n - patch for s, n in zip(start, shape))


def test_occlusion_rejects_bad_geometry(rng):
    net = init_network(tiny_spec(), 0)
    vol = rng.normal(size=(6, 6, 6))
    with pytest.raises(ShapeError):
        occlusion_map(net, vol, 0, patch=7, stride=1)
    with pytest.raises(ValueError, match="uncovered"):
        occlusion_map(net, vol, 0, patch=2, stride=3)


def test_occlusion_averages_overlaps(rng):
    net = with_random_biases(init_network(tiny_spec(), 2), 5)
    vol = rng.normal(size=(6, 6, 6))
    m = occlusion_map(net, vol, 0, patch=(4, 6, 6), stride=(2, 6, 6))
    base = target_logit(net, vol[None], 0)
    deltas = []
    for start in (0, 2):
        o = vol.copy()
        o[start : start + 4] = 0.0
        deltas.append(base - target_logit(net, o[None], 0))
    np.testing.assert_allclose(m.values[0], deltas[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(m.values[3], (deltas[0] + deltas[1]) / 2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(m.values[5], deltas[1], rtol=0, atol=1e-12)
    assert m.metadata["patch"] == [4, 6, 6] and m.metadata["positions"] == 2


def test_occlusion_batch_size_does_not_change_result(rng):
    net = with_random_biases(init_network(tiny_spec(), 2), 5)
    vol = rng.normal(size=(6, 6, 6))
    a = occlusion_map(net, vol, 0, 2, 1, batch_size=1)
    b = occlusion_map(net, vol, 0, 2, 1, batch_size=50)
    assert a.values.tobytes() == b.values.tobytes()


# -- region occlusion ----------------------------------------------------------------


def three_region_atlas():
    labels = np.zeros((6, 6, 6), dtype=np.int64)
    labels[:3, :3] = 1
    labels[3:, :, :2] = 2
    labels[:3, 3:, 3:] = 3
    return labels


def test_region_occlusion_single_region(rng):
    net = with_random_biases(init_network(tiny_spec(), 1), 4)
    vol = rng.normal(size=(6, 6, 6))
    m = region_occlusion_map(net, vol, 0, np.ones((6, 6, 6), int), baseline=-1.0)
    expected = target_logit(net, vol[None], 0) - target_logit(net, np.full((1, 6, 6, 6), -1.0), 0)
    np.testing.assert_array_equal(m.values, np.full((6, 6, 6), expected))


def test_region_occlusion_zero_network(rng):
    m = region_occlusion_map(zero_network(tiny_spec()), rng.normal(size=(6, 6, 6)), 0, three_region_atlas())
    assert not m.values.any()


def test_region_occlusion_per_region_oracle(rng):
    net = with_random_biases(init_network(tiny_spec(), 6), 7)
    vol = rng.normal(size=(6, 6, 6))
    labels = three_region_atlas()
    m = region_occlusion_map(net, vol, 1, labels)
    base = target_logit(net, vol[None], 1)
    for r in (1, 2, 3):
        o = vol.copy()
        o[labels == r] = 0.0
        expected = base - target_logit(net, o[None], 1)
        assert np.all(m.values[labels == r] == expected)
    assert not m.values[labels == 0].any()


def test_region_occlusion_errors(rng):
    net = init_network(tiny_spec(), 0)
    with pytest.raises(ShapeError):
        region_occlusion_map(net, np.zeros((6, 6, 6)), 0, np.ones((5, 6, 6), int))
    with pytest.raises(AtlasError):
        region_occlusion_map(net, np.zeros((6, 6, 6)), 0, np.zeros((6, 6, 6), int))


# -- LRP -------------------------------------------------------------------------------


def test_lrp_zero_volume():
    assert not lrp_map(init_network(default_spec(), 0), np.zeros((16, 16, 16)), 2).values.any()


def test_lrp_single_dense_layer(rng):
    spec = NetworkSpec([Flatten(), Dense(3)], (1, 3, 3, 3))
    w = rng.normal(size=(3, 27))
    net = Network(spec, [{}, {"weights": w, "bias": np.zeros(3)}])
    vol = rng.normal(size=(3, 3, 3))
    m = lrp_map(net, vol, 2, "epsilon", 0.0)
    np.testing.assert_allclose(m.values.ravel(), w[2] * vol.ravel(), rtol=1e-12, atol=1e-15)


def test_lrp_equals_gradient_times_input_bias_free(rng):
    net = init_network(default_spec(), 12)
    vol = rng.normal(size=(16, 16, 16))
    m = lrp_map(net, vol, 2, "epsilon", 0.0)
    gi = sensitivity_map(net, vol, 2).values * vol
    np.testing.assert_allclose(m.values, gi, rtol=1e-9, atol=1e-9 * np.abs(gi).max())


@pytest.mark.parametrize("rule", ["epsilon", "zplus"])
def test_lrp_conservation_bias_free(rng, rule):
    spec = tiny_spec(8)
    checked = 0
    for seed in range(12):
        net = init_network(spec, seed)
        vol = rng.normal(size=(8, 8, 8))
        z = forward(net, vol[None])[0][0]
        t = int(np.argmax(z))
        if rule == "zplus" and z[t] <= 0:
            continue
        R, logit = lrp_relevance(net, vol, t, rule, 0.0)
        assert abs(R.sum() - logit) <= 1e-9 * abs(logit)
        checked += 1
    assert checked >= 6


def test_lrp_layerwise_conservation(rng):
    net = init_network(tiny_spec(), 3)
    vol = rng.normal(size=(6, 6, 6))
    sums = []
    _, logit = lrp_relevance(net, vol, 0, "epsilon", 0.0, hook=lambda i, l, R: sums.append(R.sum()))
    np.testing.assert_allclose(sums, logit, rtol=1e-9)


def test_lrp_epsilon_gap_shrinks(rng):
    net = init_network(default_spec(), 4)
    vol = rng.normal(size=(16, 16, 16))
    gaps = []
    for eps in (1e-1, 1e-3, 1e-6):
        R, logit = lrp_relevance(net, vol, 0, "epsilon", eps)
        assert abs(R.sum()) <= abs(logit)
        gaps.append(abs(logit - R.sum()))
    assert gaps[0] > gaps[1] > gaps[2]


def test_lrp_with_biases_absorbs_relevance(rng):
    net = with_random_biases(init_network(tiny_spec(), 3), 9, scale=0.5)
    vol = rng.normal(size=(6, 6, 6))
    m = lrp_map(net, vol, 0)
    assert np.all(np.isfinite(m.values))
    assert m.metadata == {"rule": "epsilon", "epsilon": 1e-6, "score": "logit", "logit": m.metadata["logit"]}


def test_lrp_zplus_nonnegative_for_positive_inputs(rng):
    net = with_random_biases(init_network(tiny_spec(), 3), 9)
    vol = rng.uniform(0.0, 1.0, size=(6, 6, 6))
    z = forward(net, vol[None])[0][0]
    t = int(np.argmax(z))
    if z[t] > 0:
        assert lrp_map(net, vol, t, "zplus", 0.0).values.min() >= 0


def test_lrp_unknown_rule():
    with pytest.raises(ValueError):
        lrp_map(init_network(tiny_spec(), 0), np.zeros((6, 6, 6)), 0, "alpha-beta")


# -- determinism, dispatch, averaging ----------------------------------------------------


@pytest.mark.parametrize("method,opts", [
    ("sensitivity", {}), ("guided", {}), ("occlusion", {"patch": 2, "stride": 2}),
    ("region-occlusion", {"atlas": three_region_atlas()}), ("lrp", {"rule": "epsilon", "epsilon": 1e-6}),
])
def test_methods_are_deterministic(rng, method, opts):
    net = with_random_biases(init_network(tiny_spec(), 1), 1)
    vol = rng.normal(size=(6, 6, 6))
    a = compute_map(net, vol, method, 0, **opts)
    b = compute_map(net, vol, method, 0, **opts)
    assert a.method == method
    assert a.values.tobytes() == b.values.tobytes()


def test_average_single_and_copies(rng):
    m = AttributionMap(rng.normal(size=(4, 4, 4)), "lrp", 2, {"rule": "epsilon"})
    assert average_maps([m]).values.tobytes() == m.values.tobytes()
    np.testing.assert_allclose(average_maps([m] * 5).values, m.values, rtol=1e-15, atol=0)
    assert average_maps([m] * 5).metadata == {"rule": "epsilon", "count": 5}


def test_average_midpoint(rng):
    a = AttributionMap(rng.normal(size=(3, 3, 3)), "occlusion", 1)
    b = AttributionMap(rng.normal(size=(3, 3, 3)), "occlusion", 1)
    mid = average_maps([a, b]).values
    for idx in np.ndindex(3, 3, 3):
        assert mid[idx] == (a.values[idx] + b.values[idx]) / 2


def test_average_rejects_mixed(rng):
    a = AttributionMap(rng.normal(size=(3, 3, 3)), "occlusion", 1)
    with pytest.raises(ValueError):
        average_maps([a, AttributionMap(a.values, "lrp", 1)])
    with pytest.raises(ValueError):
        average_maps([a, AttributionMap(a.values, "occlusion", 0)])
    with pytest.raises(ShapeError):
        average_maps([a, AttributionMap(np.zeros((3, 3, 4)), "occlusion", 1)])
    with pytest.raises(ValueError):
        average_maps([])
