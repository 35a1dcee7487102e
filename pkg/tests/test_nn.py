import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedadc import nn
from fedadc.errors import ConfigError, InputError

from conftest import fd_grad, naive_forward, random_problem, rel_err


def test_forward_zero_params_gives_zero_logits():
    spec = nn.ModelSpec("logistic", 4, 3)
    x = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_array_equal(nn.forward(spec, spec.zeros(), x), np.zeros((5, 3)))


def test_forward_logistic_linear_map():
    spec = nn.ModelSpec("logistic", 1, 2)
    params = np.array([1.0, -1.0, 0.0, 0.0])
    np.testing.assert_array_equal(nn.forward(spec, params, np.array([[2.0]])), [[2.0, -2.0]])


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_forward_mlp_matches_naive_loops(act):
    spec = nn.ModelSpec("mlp", 2, 4, (3,), act)
    params = np.random.default_rng(0).normal(size=spec.num_params)
    x = np.array([[1.0, -1.0]])
    np.testing.assert_allclose(nn.forward(spec, params, x), naive_forward(spec, params, x),
                               rtol=0, atol=1e-14)


def test_forward_rejects_shape_mismatch():
    spec = nn.ModelSpec("mlp", 3, 2, (4,))
    with pytest.raises(ConfigError):
        nn.forward(spec, np.zeros(spec.num_params + 1), np.zeros((1, 3)))
    with pytest.raises(ConfigError):
        nn.forward(spec, spec.zeros(), np.zeros((1, 5)))


def test_model_spec_layout():
    spec = nn.ModelSpec("mlp", 32, 10, (64,))
    assert spec.num_params == 32 * 64 + 64 + 64 * 10 + 10
    assert [name for name, _ in spec.shapes] == ["fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"]
    with pytest.raises(ConfigError):
        nn.ModelSpec("mlp", 3, 1, (2,))
    with pytest.raises(ConfigError):
        nn.ModelSpec("logistic", 3, 2, (2,))


def test_param_vector_checks_layout_and_finiteness():
    spec = nn.ModelSpec("logistic", 2, 2)
    pv = nn.ParamVector.for_spec(spec, np.arange(6.0))
    assert pv.layers()["fc0.weight"].shape == (2, 2)
    with pytest.raises(ConfigError):
        nn.ParamVector.for_spec(spec, np.zeros(5))
    with pytest.raises(InputError):
        nn.ParamVector.for_spec(spec, np.array([0, 0, 0, 0, 0, np.nan]))


def test_softmax_symmetric():
    for tau in (0.1, 1.0, 7.0):
        np.testing.assert_allclose(nn.softmax_temp([2.5, 2.5, 2.5], tau), [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_analytic():
    np.testing.assert_allclose(nn.softmax_temp([math.log(2.0), 0.0]), [2 / 3, 1 / 3], atol=1e-15)
    e2 = math.exp(2.0)
    np.testing.assert_allclose(nn.softmax_temp([1.0, 0.0], 0.5), [e2 / (e2 + 1), 1 / (e2 + 1)], atol=1e-15)
    np.testing.assert_allclose(nn.softmax_temp([1.0, 0.0], 0.5), [0.88080, 0.11920], atol=5e-6)


def test_softmax_rejects_bad_temperature():
    with pytest.raises(ConfigError):
        nn.softmax_temp([1.0, 2.0], 0.0)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.integers(2, 12), elements=st.floats(-1e3, 1e3)),
       st.floats(0.05, 20.0))
def test_softmax_is_a_distribution(logits, tau):
    p = nn.softmax_temp(logits, tau)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_ce_uniform_logits():
    loss, g = nn.ce_loss_grad([0.3, 0.3], 0)
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)
    np.testing.assert_allclose(g, [-0.5, 0.5], atol=1e-15)


def test_ce_confident_limit():
    loss, _ = nn.ce_loss_grad([50.0, 0.0, 0.0], 0)
    assert loss < 1e-20


def test_ce_matches_finite_differences():
    logits = np.array([1.0, 0.0, -1.0])
    _, g = nn.ce_loss_grad(logits, 2)
    fd = fd_grad(lambda z: nn.ce_loss_grad(z, 2)[0], logits, range(3))
    assert np.all(rel_err(g, fd) <= 1e-5)


def test_ce_rejects_bad_label():
    with pytest.raises(InputError):
        nn.ce_loss_grad([0.0, 1.0], 2)


def test_kl_matched_distributions():
    logits = np.array([0.2, -1.0, 2.0])
    loss, g = nn.kl_loss_grad(logits, nn.softmax_temp(logits, 2.0), 2.0)
    assert abs(loss) < 1e-15
    assert np.abs(g).max() < 1e-15


def test_kl_one_hot_is_negative_log_prob():
    logits = np.array([0.5, 1.5, -0.3])
    loss, _ = nn.kl_loss_grad(logits, [0.0, 1.0, 0.0])
    assert loss == pytest.approx(-math.log(nn.softmax_temp(logits)[1]), rel=1e-14)


def test_kl_hand_value():
    # student probabilities (0.25, 0.75) against target (0.5, 0.5)
    logits = np.log([0.25, 0.75])
    loss, g = nn.kl_loss_grad(logits, [0.5, 0.5])
    expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
    assert loss == pytest.approx(expected, abs=1e-15)
    assert loss == pytest.approx(0.14384, abs=5e-6)
    np.testing.assert_allclose(g, [-0.25, 0.25], atol=1e-15)


def test_kl_gradient_matches_finite_differences():
    target = np.array([0.0, 0.3, 0.7])
    logits = np.array([0.4, -0.2, 0.9])
    _, g = nn.kl_loss_grad(logits, target, 1.7)
    fd = fd_grad(lambda z: nn.kl_loss_grad(z, target, 1.7)[0], logits, range(3))
    assert np.all(rel_err(g, fd) <= 1e-5)


@pytest.mark.parametrize("bad", [[0.6, 0.6], [-0.1, 1.1], [0.5, 0.5 + 1e-8]])
def test_kl_rejects_invalid_target(bad):
    with pytest.raises(InputError):
        nn.kl_loss_grad([0.0, 0.0], bad)


def test_grad_lambda_zero_is_pure_ce(rng):
    spec, params, batch, _, _ = random_problem(rng, combined=False)
    targets = rng.dirichlet(np.ones(spec.num_classes), size=len(batch))
    ce = nn.loss_and_grad(spec, params, batch, nn.LossSpec("ce"))
    comb = nn.loss_and_grad(spec, params, batch, nn.LossSpec("combined", 0.0, 3.0), targets)
    assert ce[0] == comb[0]
    np.testing.assert_array_equal(ce[1], comb[1])


def test_grad_lambda_one_is_kl_alone(rng):
    spec = nn.ModelSpec("logistic", 3, 4)
    params = rng.normal(size=spec.num_params)
    batch = nn.Batch(rng.normal(size=(5, 3)), rng.integers(0, 4, size=5))
    targets = rng.dirichlet(np.ones(4), size=5)
    loss, _ = nn.loss_and_grad(spec, params, batch, nn.LossSpec("combined", 1.0, 2.0), targets)
    logits = nn.forward(spec, params, batch)
    kl = np.mean([nn.kl_loss_grad(z, t, 2.0)[0] for z, t in zip(logits, targets)])
    assert loss == pytest.approx(kl, rel=1e-13)


def test_grad_matches_finite_differences(rng):
    for _ in range(30):
        spec, params, batch, loss, targets = random_problem(rng)
        g = nn.grad(spec, params, batch, loss, targets)
        coords = rng.choice(spec.num_params, size=min(20, spec.num_params), replace=False)
        fd = fd_grad(lambda p: nn.loss_value(spec, p, batch, loss, targets), params, coords)
        assert np.all(rel_err(g[coords], fd) <= 1e-5)


def test_grad_of_repeated_sample_equals_single(rng):
    spec = nn.ModelSpec("mlp", 4, 3, (5,))
    params = rng.normal(size=spec.num_params)
    x = rng.normal(size=(1, 4))
    one = nn.grad(spec, params, nn.Batch(x, [2]), nn.LossSpec())
    two = nn.grad(spec, params, nn.Batch(np.vstack([x, x]), [2, 2]), nn.LossSpec())
    np.testing.assert_allclose(one, two, rtol=1e-15, atol=1e-17)


def test_weight_decay_adds_l2_gradient(rng):
    spec = nn.ModelSpec("logistic", 3, 2)
    params = rng.normal(size=spec.num_params)
    batch = nn.Batch(rng.normal(size=(4, 3)), [0, 1, 1, 0])
    plain = nn.grad(spec, params, batch, nn.LossSpec())
    decayed = nn.grad(spec, params, batch, nn.LossSpec(weight_decay=0.1))
    np.testing.assert_allclose(decayed - plain, 0.1 * params, atol=1e-15)


def test_grad_requires_targets_for_combined_loss(rng):
    spec = nn.ModelSpec("logistic", 2, 2)
    batch = nn.Batch(np.zeros((1, 2)), [0])
    with pytest.raises(ConfigError):
        nn.grad(spec, spec.zeros(), batch, nn.LossSpec("combined", 0.5, 1.0))


def test_loss_spec_ranges():
    with pytest.raises(ConfigError):
        nn.LossSpec("combined", 1.5)
    with pytest.raises(ConfigError):
        nn.LossSpec("ce", 0.0, 0.0)
    with pytest.raises(ConfigError):
        nn.LossSpec("ce", weight_decay=-1.0)


def test_forward_and_grad_are_pure(rng):
    spec, params, batch, loss, targets = random_problem(rng, combined=True)
    before = params.copy()
    a = nn.loss_and_grad(spec, params, batch, loss, targets)
    b = nn.loss_and_grad(spec, params, batch, loss, targets)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(params, before)
    np.testing.assert_array_equal(nn.forward(spec, params, batch), nn.forward(spec, params, batch))
