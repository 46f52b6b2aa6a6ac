import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avfuse.batchnorm import (EVAL, TRAIN, ABRiLayer, BatchNormLayer, abri_forward, abri_param_count,
                              abri_wrap, bn_backward, bn_forward, reset_abnormal)
from avfuse.errors import ContractError, DimensionError, DivisionHazardError
from avfuse.models import Classifier, ModelConfig, norm_layers, wrap_abri
from avfuse.numerics import Tensor, finite_diff_check, max_relative_error


def make_layer(c, rng=None, eps=1e-5):
    layer = BatchNormLayer(c, eps=eps)
    if rng is not None:
        layer.gamma.data[:] = rng.normal(1, 0.5, c)
        layer.beta.data[:] = rng.normal(0, 0.5, c)
    return layer


# ---------------------------------------------------------------- forward

def test_forward_reference_values():
    layer = make_layer(1, eps=0.0)
    layer.gamma.data[:] = 2.0
    layer.beta.data[:] = 1.0
    x = np.array([-1.0, 0.0, 1.0]).reshape(3, 1, 1, 1)
    y, cache = bn_forward(x, layer)
    s = np.sqrt(2 / 3)
    np.testing.assert_allclose(y.ravel(), [1 - 2 / s, 1.0, 1 + 2 / s], atol=1e-12)
    np.testing.assert_allclose(y.ravel(), [-1.44949, 1.0, 3.44949], atol=1e-5)
    assert cache.var[0] == pytest.approx(2 / 3) and cache.m == 3


def test_forward_identity_on_standardized_input(rng):
    x = rng.standard_normal((6, 2, 3, 3))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y, _ = bn_forward(x, make_layer(2, eps=0.0))
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_zero_gamma_gives_constant_beta(rng):
    layer = make_layer(3)
    layer.gamma.data[:] = 0.0
    layer.beta.data[:] = [0.5, -1.0, 2.0]
    y, _ = bn_forward(rng.standard_normal((4, 3, 2, 2)), layer)
    for k, b in enumerate([0.5, -1.0, 2.0]):
        assert np.all(y[:, k] == b)


def test_zero_variance_without_eps_is_a_hazard():
    with pytest.raises(DivisionHazardError):
        bn_forward(np.ones((4, 1, 2, 2)), make_layer(1, eps=0.0))


def test_single_value_per_channel_rejected():
    with pytest.raises(ContractError):
        bn_forward(np.ones((1, 2, 1, 1)), make_layer(2))


def test_running_stats_update(rng):
    layer = make_layer(2)
    x = rng.standard_normal((5, 2, 3, 3)) * 3 + 1
    bn_forward(x, layer)
    np.testing.assert_allclose(layer.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(layer.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_eval_mode_uses_running_stats(rng):
    layer = make_layer(2, rng)
    layer.running_mean[:] = [1.0, -1.0]
    layer.running_var[:] = [4.0, 0.25]
    x = rng.standard_normal((3, 2, 2, 2))
    y, cache = bn_forward(x, layer, EVAL)
    assert cache is None
    ref = layer.gamma.data.reshape(1, -1, 1, 1) * (x - layer.running_mean.reshape(1, -1, 1, 1)) \
        / np.sqrt(layer.running_var + layer.eps).reshape(1, -1, 1, 1) + layer.beta.data.reshape(1, -1, 1, 1)
    np.testing.assert_allclose(y, ref, atol=1e-14)


@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_train_output_moments(seed, c):
    rng = np.random.default_rng(seed)
    layer = make_layer(c, rng)
    x = rng.standard_normal((4, c, 3, 2)) * rng.uniform(0.1, 5)
    y, cache = bn_forward(x, layer)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), layer.beta.data, atol=1e-9)
    expected_sd = np.abs(layer.gamma.data) * np.sqrt(cache.var / (cache.var + layer.eps))
    np.testing.assert_allclose(y.std(axis=(0, 2, 3)), expected_sd, atol=1e-9)


# ---------------------------------------------------------------- backward

def _bn_grads_numeric(x, layer, dy):
    def f_x(v):
        return float(np.sum(bn_forward(v, _clone(layer))[0] * dy))

    def f_g(v):
        l2 = _clone(layer)
        l2.gamma.data[:] = v
        return float(np.sum(bn_forward(x, l2)[0] * dy))

    def f_b(v):
        l2 = _clone(layer)
        l2.beta.data[:] = v
        return float(np.sum(bn_forward(x, l2)[0] * dy))

    return (finite_diff_check(f_x, x), finite_diff_check(f_g, layer.gamma.data),
            finite_diff_check(f_b, layer.beta.data))


def _clone(layer):
    l2 = BatchNormLayer(layer.channels, layer.eps, layer.momentum)
    l2.gamma.data[:] = layer.gamma.data
    l2.beta.data[:] = layer.beta.data
    return l2


def test_backward_matches_finite_differences(rng):
    layer = make_layer(3, rng)
    x = rng.standard_normal((4, 3, 2, 2))
    dy = rng.standard_normal(x.shape)
    _, cache = bn_forward(x, _clone(layer))
    dx, dg, db = bn_backward(dy, cache, layer)
    nx, ng, nb = _bn_grads_numeric(x, layer, dy)
    assert max_relative_error(dx, nx, floor=1e-4) < 1e-6
    assert max_relative_error(dg, ng, floor=1e-4) < 1e-6
    assert max_relative_error(db, nb, floor=1e-4) < 1e-6


def test_zero_gamma_kills_input_gradient(rng):
    layer = make_layer(3, rng)
    layer.gamma.data[1] = 0.0
    x = rng.standard_normal((4, 3, 2, 2))
    _, cache = bn_forward(x, layer)
    dx, _, _ = bn_backward(rng.standard_normal(x.shape), cache, layer)
    assert np.all(dx[:, 1] == 0.0)
    assert np.any(dx[:, 0] != 0.0)


def test_constant_upstream_gradient_cancels(rng):
    layer = make_layer(2, rng)
    x = rng.standard_normal((4, 2, 3, 3))
    _, cache = bn_forward(x, layer)
    dy = np.zeros(x.shape)
    dy[:, 0] = 0.7
    dx, _, _ = bn_backward(dy, cache, layer)
    np.testing.assert_allclose(dx[:, 0], 0.0, atol=1e-14)


@given(st.integers(0, 2**31 - 1), st.floats(-50, 50).filter(lambda s: abs(s) > 1e-3))
def test_input_gradient_linear_in_gamma(seed, s):
    rng = np.random.default_rng(seed)
    layer = make_layer(2, rng)
    x = rng.standard_normal((3, 2, 2, 2))
    dy = rng.standard_normal(x.shape)
    _, cache = bn_forward(x, layer)
    dx, _, _ = bn_backward(dy, cache, layer)
    layer.gamma.data[0] *= s
    dx_s, _, _ = bn_backward(dy, cache, layer)
    assert max_relative_error(dx_s[:, 0], s * dx[:, 0], floor=1e-300) < 1e-12
    np.testing.assert_array_equal(dx_s[:, 1], dx[:, 1])


def test_backward_channel_mismatch(rng):
    _, cache = bn_forward(rng.standard_normal((2, 3, 2, 2)), make_layer(3))
    with pytest.raises(DimensionError):
        bn_backward(np.zeros((2, 3, 2, 2)), cache, make_layer(2))


def test_autodiff_node_agrees_with_explicit_backward(rng):
    layer = make_layer(2, rng)
    x0 = rng.standard_normal((3, 2, 2, 2))
    dy = rng.standard_normal(x0.shape)
    x = Tensor(x0, requires_grad=True)
    (layer(x) * dy).sum().backward()
    _, cache = bn_forward(x0, _clone(layer))
    dx, dg, db = bn_backward(dy, cache, layer)
    np.testing.assert_allclose(x.grad, dx, atol=1e-14)
    np.testing.assert_allclose(layer.gamma.grad, dg, atol=1e-14)
    np.testing.assert_allclose(layer.beta.grad, db, atol=1e-14)


# ---------------------------------------------------------------- ABRi

def test_wrap_initialisation(rng):
    ori = make_layer(4, rng)
    ab = abri_wrap(ori, 0.3)
    assert ab.bn_ori is ori
    np.testing.assert_array_equal(ab.bn_add.gamma.data, np.ones(4))
    np.testing.assert_array_equal(ab.bn_add.beta.data, np.zeros(4))
    np.testing.assert_array_equal(ab.bn_add.running_mean, np.zeros(4))
    np.testing.assert_array_equal(ab.bn_add.running_var, np.ones(4))
    assert ab.bn_add.eps == ori.eps and ab.bn_add.momentum == ori.momentum
    np.testing.assert_array_equal(ab.alpha.data, np.full(4, 0.3))


def test_double_wrap_rejected(rng):
    with pytest.raises(ContractError):
        abri_wrap(abri_wrap(make_layer(2)))


@pytest.mark.parametrize("mode", [TRAIN, EVAL])
def test_alpha_endpoints(rng, mode):
    x = rng.standard_normal((4, 3, 2, 2))
    for a, branch in ((1.0, "bn_ori"), (0.0, "bn_add")):
        ab = abri_wrap(make_layer(3, rng), a)
        ab.bn_add.gamma.data[:] = rng.normal(1, 0.3, 3)
        ref_layer = _clone(getattr(ab, branch))
        ref_layer.running_mean[:] = getattr(ab, branch).running_mean
        ref_layer.running_var[:] = getattr(ab, branch).running_var
        y, _ = abri_forward(Tensor(x), ab, mode)
        ref, _ = bn_forward(x, ref_layer, mode)
        np.testing.assert_allclose(y.data, ref, atol=1e-15, rtol=0)


def test_abnormal_original_branch_contributes_nothing(rng):
    ori = make_layer(2, eps=0.0)
    ori.gamma.data[:] = 1e-12
    ori.beta.data[:] = 1e-12
    ab = abri_wrap(ori, 0.5)
    x = rng.standard_normal((8, 2, 3, 3))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y, _ = abri_forward(Tensor(x), ab, TRAIN)
    np.testing.assert_allclose(y.data, 0.5 * x, atol=1e-9)


def test_both_inner_layers_update_running_stats(rng):
    ab = abri_wrap(make_layer(2))
    x = rng.standard_normal((4, 2, 2, 2)) + 3
    abri_forward(Tensor(x), ab, TRAIN)
    assert np.all(ab.bn_ori.running_mean != 0) and np.all(ab.bn_add.running_mean != 0)


def test_abri_gradients_reach_everything_even_with_zero_gamma(rng):
    ori = make_layer(2)
    ori.gamma.data[:] = 0.0
    ori.beta.data[:] = -1e-12
    ab = abri_wrap(ori, 0.5)
    ab.bn_add.gamma.data[:] = [1.3, 0.7]
    x0 = rng.standard_normal((3, 2, 2, 2))
    dy = rng.standard_normal(x0.shape)
    x = Tensor(x0, requires_grad=True)
    y, _ = abri_forward(x, ab, TRAIN)
    (y * dy).sum().backward()

    def loss_with(setter):
        def f(v):
            a2 = abri_wrap(_clone(ori), 0.5)
            a2.bn_add.gamma.data[:] = ab.bn_add.gamma.data
            xin = setter(a2, v)
            return float((abri_forward(Tensor(xin), a2, TRAIN)[0].data * dy).sum())
        return f

    def set_alpha(a2, v):
        a2.alpha.data[:] = v
        return x0

    def set_gamma_add(a2, v):
        a2.bn_add.gamma.data[:] = v
        return x0

    def set_beta_add(a2, v):
        a2.bn_add.beta.data[:] = v
        return x0

    checks = [(ab.alpha, set_alpha), (ab.bn_add.gamma, set_gamma_add), (ab.bn_add.beta, set_beta_add)]
    for p, setter in checks:
        numeric = finite_diff_check(loss_with(setter), p.data.copy())
        assert np.all(p.grad != 0)
        assert max_relative_error(p.grad, numeric, floor=1e-4) < 1e-6
    nx = finite_diff_check(loss_with(lambda a2, v: v), x0)
    assert np.any(x.grad != 0)
    assert max_relative_error(x.grad, nx, floor=1e-4) < 1e-6


@pytest.mark.parametrize("c,expected", [(64, (128, 192, 1.5)), (1, (2, 3, 1.5))])
def test_param_count(c, expected):
    assert abri_param_count(abri_wrap(make_layer(c))) == expected


def test_param_overhead_in_small_convnet():
    model = Classifier(ModelConfig(channels=[16, 32, 64]))
    before = sum(bn.gamma.size + bn.beta.size for _, bn in norm_layers(model))
    wrap_abri(model)
    counts = [abri_param_count(l) for _, l in norm_layers(model)]
    assert all(r == 1.5 for _, _, r in counts)
    assert sum(c[1] for c in counts) == 336 and before == 224
    assert isinstance(norm_layers(model)[0][1], ABRiLayer)


def test_reset_abnormal_baseline():
    layer = make_layer(3)
    layer.gamma.data[:] = [1e-12, 0.5, 1e-12]
    layer.beta.data[:] = [1e-12, 0.0, 0.3]
    assert reset_abnormal(layer) == [0]
    assert layer.gamma.data[0] == 1.0 and layer.beta.data[0] == 0.0
