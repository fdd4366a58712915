import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autodesign.errors import InputError, TrainingError, UsageError
from autodesign.nncore import (
    Dataset,
    LayerSpec,
    NetSpec,
    SGDConfig,
    activation_counts,
    backward,
    clip_grads,
    count_macs,
    cross_entropy,
    expand_block,
    forward,
    init_params,
    layer_backward,
    layer_forward,
    net_macs,
    softmax,
    train_sgd,
    weight_count,
)


def small_net(residual_mb=True):
    hw = (4, 4)
    return NetSpec([
        LayerSpec("conv2d", 2, 3, kernel_size=3, spatial_in=hw),
        LayerSpec("relu", 3, 3, spatial_in=hw),
        LayerSpec("mbconv", 3, 3, kernel_size=3, spatial_in=hw, expansion_ratio=2, residual=residual_mb),
        LayerSpec("depthwise_conv2d", 3, 3, kernel_size=3, spatial_in=hw),
        LayerSpec("pointwise_conv2d", 3, 4, spatial_in=hw),
        LayerSpec("global_pool", 4, 4, spatial_in=hw),
        LayerSpec("dense", 4, 3),
    ], 3)


def randomize_biases(params, rng):
    # zero biases put ReLU inputs exactly on the kink for zero-padded borders
    for p in params.values():
        for k, v in p.items():
            if k.startswith("b"):
                v[...] = rng.normal(scale=0.3, size=v.shape)


def loss_of(net, params, x, y):
    return cross_entropy(forward(net, params, x)[0], y)[0]


# -- cost arithmetic ----------------------------------------------------------


def test_mac_counts_match_hand_arithmetic():
    assert count_macs(LayerSpec("dense", 5, 7)) == 35
    assert count_macs(LayerSpec("conv2d", 3, 8, kernel_size=3, spatial_in=(6, 6))) == 9 * 3 * 8 * 36
    assert count_macs(LayerSpec("depthwise_conv2d", 8, 8, kernel_size=5, spatial_in=(4, 4))) == 25 * 8 * 16
    assert count_macs(LayerSpec("pointwise_conv2d", 8, 4, spatial_in=(4, 4))) == 8 * 4 * 16
    assert count_macs(LayerSpec("relu", 3, 3, spatial_in=(4, 4))) == 0


def test_mbconv_costs_are_sum_of_primitives():
    mb = LayerSpec("mbconv", 4, 4, kernel_size=5, spatial_in=(5, 5), expansion_ratio=6, residual=True)
    parts = expand_block(mb)
    assert [p.kind for p in parts] == ["pointwise_conv2d", "depthwise_conv2d", "pointwise_conv2d"]
    assert parts[1].in_channels == 24
    assert count_macs(mb) == 25 * (4 * 24 + 25 * 24 + 24 * 4)
    assert weight_count(mb) == 4 * 24 + 25 * 24 + 24 * 4


def test_activation_counts():
    assert activation_counts(LayerSpec("conv2d", 3, 8, kernel_size=3, spatial_in=(6, 6))) == (108, 288)
    assert activation_counts(LayerSpec("global_pool", 8, 8, spatial_in=(6, 6))) == (288, 8)


# -- validation ---------------------------------------------------------------


def test_layer_spec_validation():
    with pytest.raises(InputError):
        LayerSpec("conv2d", 3, 8, kernel_size=2, spatial_in=(4, 4))
    with pytest.raises(InputError):
        LayerSpec("depthwise_conv2d", 3, 4, spatial_in=(4, 4))
    with pytest.raises(InputError):
        LayerSpec("banana", 3, 3)
    with pytest.raises(InputError):
        LayerSpec("dense", 3, 3, spatial_in=(2, 2))


def test_netspec_rejects_shape_mismatch():
    with pytest.raises(InputError):
        NetSpec([LayerSpec("conv2d", 3, 8, kernel_size=3, spatial_in=(4, 4)),
                 LayerSpec("conv2d", 4, 8, kernel_size=3, spatial_in=(4, 4))], 8)


def test_forward_rejects_wrong_input_shape():
    net = small_net()
    params = init_params(net, 0)
    with pytest.raises(InputError):
        forward(net, params, np.zeros((2, 5, 4, 2)))


# -- gradients ----------------------------------------------------------------


@pytest.mark.parametrize("residual", [False, True])
def test_network_gradients_match_finite_differences(residual):
    rng = np.random.default_rng(1)
    net = small_net(residual)
    params = init_params(net, rng)
    randomize_biases(params, rng)
    x = rng.normal(size=(3, 4, 4, 2))
    y = np.array([0, 2, 1])
    logits, trace = forward(net, params, x)
    _, dlogits = cross_entropy(logits, y)
    grads, dx = backward(trace, dlogits)
    h = 1e-6
    worst = 0.0
    for i, p in params.items():
        for k, v in p.items():
            flat = v.reshape(-1)
            for idx in rng.choice(flat.size, size=min(6, flat.size), replace=False):
                old = flat[idx]
                flat[idx] = old + h
                lp = loss_of(net, params, x, y)
                flat[idx] = old - h
                lm = loss_of(net, params, x, y)
                flat[idx] = old
                num = (lp - lm) / (2 * h)
                ana = grads[i][k].reshape(-1)[idx]
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    assert worst <= 1e-4
    # input gradient
    xf = x.reshape(-1)
    for idx in rng.choice(xf.size, size=8, replace=False):
        old = xf[idx]
        xf[idx] = old + h
        lp = loss_of(net, params, x, y)
        xf[idx] = old - h
        lm = loss_of(net, params, x, y)
        xf[idx] = old
        num = (lp - lm) / (2 * h)
        assert abs(num - dx.reshape(-1)[idx]) <= 1e-4 * max(abs(num), 1e-6) + 1e-9


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    loss, d = cross_entropy(z, np.array([1, 2]))
    p = softmax(z)
    expected = p.copy()
    expected[0, 1] -= 1
    expected[1, 2] -= 1
    np.testing.assert_allclose(d, expected / 2)
    assert loss == pytest.approx(-(np.log(p[0, 1]) + np.log(p[1, 2])) / 2)


def test_backward_refuses_consumed_or_stale_trace():
    net = small_net()
    params = init_params(net, 0)
    x = np.zeros((1, 4, 4, 2))
    logits, trace = forward(net, params, x)
    backward(trace, np.ones_like(logits))
    with pytest.raises(UsageError):
        backward(trace, np.ones_like(logits))
    logits, trace = forward(net, params, x)
    params.bump()
    with pytest.raises(UsageError):
        backward(trace, np.ones_like(logits))
    logits, trace = forward(net, params, x)
    with pytest.raises(UsageError):
        backward(trace, np.ones((2, 3)))


def test_residual_zero_layer_is_identity():
    layer = LayerSpec("zero", 3, 3, spatial_in=(2, 2), residual=True)
    x = np.arange(12.0).reshape(1, 2, 2, 3)
    y, cache = layer_forward(layer, None, x)
    np.testing.assert_array_equal(y, x)
    dx, _ = layer_backward(layer, None, cache, np.ones_like(x))
    np.testing.assert_array_equal(dx, np.ones_like(x))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3, 5]), st.integers(0, 10**6))
def test_conv_matches_direct_loop(cin, cout, k, seed):
    rng = np.random.default_rng(seed)
    layer = LayerSpec("conv2d", cin, cout, kernel_size=k, spatial_in=(4, 3))
    W = rng.normal(size=(k, k, cin, cout))
    b = rng.normal(size=cout)
    x = rng.normal(size=(2, 4, 3, cin))
    y, _ = layer_forward(layer, {"W": W, "b": b}, x)
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ref = np.zeros((2, 4, 3, cout))
    for i in range(4):
        for j in range(3):
            ref[:, i, j] = np.einsum("nabc,abcd->nd", xp[:, i:i + k, j:j + k], W) + b
    np.testing.assert_allclose(y, ref, atol=1e-12)


# -- training -----------------------------------------------------------------


def toy_dataset(seed=0, n=128):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4, 4, 2))
    y = (x[:, :, :, 0].mean(axis=(1, 2)) > 0).astype(int)
    return Dataset(x[: n // 2], y[: n // 2], x[n // 2:], y[n // 2:], 2)


def tiny_net():
    hw = (4, 4)
    return NetSpec([LayerSpec("conv2d", 2, 3, kernel_size=3, spatial_in=hw), LayerSpec("relu", 3, 3, spatial_in=hw),
                    LayerSpec("global_pool", 3, 3, spatial_in=hw), LayerSpec("dense", 3, 2)], 2)


def test_training_is_deterministic_and_learns():
    ds = toy_dataset()
    cfg = SGDConfig(lr=0.1, epochs=15, batch=16, seed=3)
    a = train_sgd(tiny_net(), ds, cfg)
    b = train_sgd(tiny_net(), ds, cfg)
    assert a.accuracy == b.accuracy
    for i in a.params:
        for k in a.params[i]:
            np.testing.assert_array_equal(a.params[i][k], b.params[i][k])
    assert a.losses[-1] < a.losses[0]
    assert a.accuracy >= 0.8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_reports_epoch():
    ds = toy_dataset()
    with pytest.raises(TrainingError) as e:
        train_sgd(tiny_net(), ds, SGDConfig(lr=1e300, epochs=5, batch=16, seed=0))
    assert e.value.epoch >= 0


def test_clip_grads_bounds_global_norm():
    g = {0: {"W": np.full((2, 2), 3.0)}, 1: {"b": np.array([4.0])}}
    before = clip_grads(g, 1.0)
    assert before == pytest.approx(np.sqrt(4 * 9 + 16))
    after = np.sqrt(sum(np.sum(v ** 2) for d in g.values() for v in d.values()))
    assert after == pytest.approx(1.0)
    g2 = {0: {"W": np.ones(2)}}
    clip_grads(g2, 0.0)
    np.testing.assert_array_equal(g2[0]["W"], np.ones(2))


def test_net_macs_sums_layers():
    net = small_net()
    assert net_macs(net) == sum(count_macs(l) for l in net.layers)
