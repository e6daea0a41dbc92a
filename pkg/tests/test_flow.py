import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from psm.errors import DivergenceError, FlowError
from psm.flow import (
    COUPLINGS,
    FlowParams,
    TrainConfig,
    analytic_parameter_count,
    fit,
    forward_f,
    gelu,
    gelu_grad,
    grad_check,
    init_flow,
    inverse_g,
    log_prob,
    mean_nll,
    nll_and_grad,
    sample,
)

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def perturbed(dim, cond_dim=0, scale=0.3, seed=0, elementwise=None, capacity=8, mono_scale=0.02):
    """A flow with every parameter moved off its initial value."""
    p = init_flow(dim, cond_dim, capacity, seed, elementwise=elementwise)
    rng = np.random.default_rng(seed + 1)
    arrays = [a + rng.normal(0.0, mono_scale if name.startswith("m.") else scale, a.shape) for name, a in p.arrays()]
    return p.with_arrays(arrays)


def split_of(train, test, ctr=None, cte=None):
    ctr = np.zeros((len(train), 0)) if ctr is None else ctr
    cte = np.zeros((len(test), 0)) if cte is None else cte
    return SimpleNamespace(train=train, test=test, cond_train=ctr, cond_test=cte)


def test_shapes_follow_capacity():
    low, high = init_flow(2, 0, "low"), init_flow(2, 0, "high")
    assert len(low.couplings) == len(high.couplings) == COUPLINGS == 6
    assert low.hidden == 32 and high.hidden == 128
    for layer in low.couplings:
        p = layer.params
        assert p["s_w1"].shape == p["t_w1"].shape == (1, 32)
        assert p["s_w2"].shape == p["t_w2"].shape == (32, 1)


def test_conditional_inputs_widen_first_layer():
    p = init_flow(5, 3, "low")
    for layer in p.couplings:
        assert layer.params["s_w1"].shape[0] == len(layer.passthrough) + 3


def test_zero_dim_rejected():
    with pytest.raises(FlowError):
        init_flow(0)


@pytest.mark.parametrize("dim", [2, 3, 7, 10])
def test_every_dimension_transformed(dim):
    p = init_flow(dim, 0, "low", seed=dim)
    covered = np.zeros(dim, dtype=bool)
    for layer in p.couplings:
        covered[layer.transformed] = True
    assert covered.all()


@pytest.mark.parametrize("dim,cond_dim,elementwise", [(1, 0, None), (3, 2, None), (4, 0, True)])
def test_identity_at_init(dim, cond_dim, elementwise):
    p = init_flow(dim, cond_dim, "low", 5, elementwise=elementwise)
    x = np.random.default_rng(0).normal(size=(50, dim))
    c = np.ones((50, cond_dim))
    z, ld = forward_f(p, x, c)
    np.testing.assert_array_equal(z, x)
    np.testing.assert_array_equal(ld, 0.0)
    np.testing.assert_allclose(inverse_g(p, x, c), x, atol=1e-12)


def test_identity_log_prob_values():
    assert log_prob(init_flow(1), np.zeros(1)) == pytest.approx(-0.9189385, abs=1e-7)
    assert log_prob(init_flow(2), np.zeros(2)) == pytest.approx(-1.8378771, abs=1e-7)


def test_constant_log_two_scale():
    p = init_flow(2, 0, "low", 0, couplings=1)
    layer = p.couplings[0]
    layer.params["s_b2"][:] = np.arctanh(np.log(2.0) / layer.params["bound"])
    x = np.array([[0.3, -1.2], [2.0, 5.0]])
    z, ld = forward_f(p, x)
    np.testing.assert_allclose(ld, np.log(2.0), atol=1e-12)
    tr = layer.transformed
    np.testing.assert_allclose(z[:, tr], 2.0 * x[:, tr], atol=1e-12)
    np.testing.assert_allclose(inverse_g(p, z), x, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 10_000), st.booleans())
def test_bijectivity_and_logdet_antisymmetry(dim, cond_dim, seed, elementwise):
    p = perturbed(dim, cond_dim, seed=seed, elementwise=elementwise or None)
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 2, size=(40, dim))
    c = rng.normal(size=(40, cond_dim))
    z, ld = forward_f(p, x, c)
    back, ld_inv = inverse_g(p, z, c, return_logdet=True)
    assert np.max(np.abs(back - x)) <= 1e-6
    assert np.max(np.abs(ld + ld_inv)) <= 1e-8
    zz = rng.normal(size=(40, dim))
    np.testing.assert_allclose(forward_f(p, inverse_g(p, zz, c), c)[0], zz, atol=1e-6)


def test_thousand_random_points_round_trip():
    p = perturbed(4, 2, seed=3, elementwise=True)
    rng = np.random.default_rng(9)
    x, c = rng.normal(size=(1000, 4)), rng.normal(size=(1000, 2))
    assert np.max(np.abs(inverse_g(p, forward_f(p, x, c)[0], c) - x)) <= 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_one_dimensional_normalization(seed):
    p = perturbed(1, 0, scale=0.5, seed=seed, mono_scale=0.05)
    grid = np.linspace(-50, 50, 200_001)
    total = np.trapezoid(np.exp(log_prob(p, grid[:, None])), grid)
    assert 0.99 <= total <= 1.01


@pytest.mark.parametrize("seed", [0, 1])
def test_two_dimensional_normalization(seed):
    p = perturbed(2, 1, scale=0.1, seed=seed)
    g = np.linspace(-15, 15, 1201)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dens = np.exp(log_prob(p, pts, np.full((len(pts), 1), 0.5))).reshape(xx.shape)
    total = np.trapezoid(np.trapezoid(dens, g, axis=1), g)
    assert 0.99 <= total <= 1.01


def test_non_finite_input_rejected():
    p = init_flow(2)
    with pytest.raises(FlowError, match="non-finite"):
        forward_f(p, np.array([[np.nan, 0.0]]))
    with pytest.raises(FlowError, match="non-finite"):
        inverse_g(p, np.array([[np.inf, 0.0]]))


def test_shape_mismatch_rejected():
    with pytest.raises(FlowError):
        forward_f(init_flow(3), np.zeros((2, 2)))
    with pytest.raises(FlowError):
        forward_f(init_flow(2, 2), np.zeros((2, 2)))


def test_identity_sampling_is_standard_normal():
    n = 4000
    x = sample(init_flow(3), n, seed=4)
    assert np.all(np.abs(x.mean(axis=0)) < 5 / np.sqrt(n))
    np.testing.assert_array_equal(x, sample(init_flow(3), n, seed=4))


@pytest.mark.parametrize("dim,cond_dim,elementwise", [(1, 0, None), (1, 2, None), (2, 0, False), (3, 2, True), (6, 1, True)])
def test_gradients_match_finite_differences(dim, cond_dim, elementwise):
    p = perturbed(dim, cond_dim, seed=dim + cond_dim, elementwise=elementwise)
    rng = np.random.default_rng(7)
    x, c = rng.normal(size=(24, dim)), rng.normal(size=(24, cond_dim))
    assert grad_check(p, x, c, n_params=300) <= 1e-4


def test_gradient_check_at_identity_init():
    p = init_flow(3, 1, "low", 2)
    rng = np.random.default_rng(0)
    assert grad_check(p, rng.normal(size=(32, 3)), rng.normal(size=(32, 1)), n_params=256) <= 1e-4


def test_empty_parameter_subset_is_vacuous():
    p = init_flow(2)
    assert grad_check(p, np.zeros((4, 2)), indices=[]) == 0.0


def test_corrupted_gradient_detected():
    p = perturbed(2, 0, seed=1)

    def broken(params, x, c):
        loss, grads = nll_and_grad(params, x, c)
        return loss, [g * 1.5 for g in grads]

    x = np.random.default_rng(0).normal(size=(16, 2))
    assert grad_check(p, x, grad_fn=broken, n_params=100) > 1e-2


@pytest.mark.parametrize("dim,cond_dim,capacity,elementwise", [(1, 0, "low", None), (1, 3, "high", None),
                                                               (5, 2, "low", None), (9, 2, "high", True)])
def test_parameter_count_matches_shapes(dim, cond_dim, capacity, elementwise):
    p = init_flow(dim, cond_dim, capacity, elementwise=elementwise)
    hidden = 32 if capacity == "low" else 128
    assert p.parameter_count == analytic_parameter_count(dim, cond_dim, hidden, elementwise=elementwise)


def test_parameter_count_by_hand():
    # dim 2, no conditional, hidden 32: each coupling has 1 input and 1 output per net
    per_net = (1 * 32 + 32) + (32 * 1 + 1)
    per_coupling = 2 * per_net + 1  # plus the bound
    assert init_flow(2, 0, "low").parameter_count == 6 * per_coupling


def test_json_round_trip_is_bit_identical():
    p = perturbed(4, 2, seed=5, elementwise=True)
    q = FlowParams.from_json(json.loads(json.dumps(p.to_json())))
    x = np.random.default_rng(1).normal(size=(30, 4))
    c = np.random.default_rng(2).normal(size=(30, 2))
    np.testing.assert_array_equal(log_prob(p, x, c), log_prob(q, x, c))


def test_gelu_tanh_form_and_derivative():
    u = np.linspace(-6, 6, 101)
    k = np.sqrt(2 / np.pi)
    np.testing.assert_allclose(gelu(u), 0.5 * u * (1 + np.tanh(k * (u + 0.044715 * u**3))), atol=1e-15)
    h = 1e-6
    np.testing.assert_allclose(gelu_grad(u), (gelu(u + h) - gelu(u - h)) / (2 * h), atol=1e-8)
    assert np.max(np.abs(gelu(u) - u * stats.norm.cdf(u))) < 1e-3


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.learning_rate, c.weight_decay, c.max_epoch, c.patience, c.capacity) == (5e-4, 5e-2, 1000, 20, "low")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(capacity="medium")


def test_fit_keeps_best_epoch_when_identity_already_fits():
    rng = np.random.default_rng(0)
    data = split_of(rng.normal(size=(900, 1)), rng.normal(size=(100, 1)))
    p0 = init_flow(1)
    p, rep = fit(p0, data, TrainConfig(max_epoch=200))
    assert rep.test_nll <= rep.history[0]
    assert rep.test_nll == min(rep.history)
    assert rep.test_nll == pytest.approx(mean_nll(p, data.test))
    assert rep.best_epoch == int(np.argmin(rep.history))
    assert rep.parameter_count == p0.parameter_count


def test_fit_is_deterministic():
    rng = np.random.default_rng(1)
    data = split_of(rng.normal(size=(200, 2)) * [1, 3], rng.normal(size=(20, 2)))
    a, ra = fit(init_flow(2, 0, "low", 3), data, TrainConfig(max_epoch=30))
    b, rb = fit(init_flow(2, 0, "low", 3), data, TrainConfig(max_epoch=30))
    for (_, x), (_, y) in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert ra.history == rb.history


def test_divergence_reports_epoch(monkeypatch):
    import psm.flow as flow

    calls = {"n": 0}
    real = flow.nll_and_grad

    def poisoned(params, x, c=None):
        calls["n"] += 1
        loss, grads = real(params, x, c)
        return (float("nan") if calls["n"] == 3 else loss), grads

    monkeypatch.setattr(flow, "nll_and_grad", poisoned)
    data = split_of(np.random.default_rng(0).normal(size=(50, 1)), np.zeros((5, 1)))
    with pytest.raises(DivergenceError) as info:
        fit(init_flow(1), data, TrainConfig(max_epoch=10))
    assert info.value.epoch == 3


def test_conditioning_moves_samples_in_trained_direction():
    rng = np.random.default_rng(3)
    n = 600
    label = rng.integers(0, 2, size=n).astype(float)
    x = np.stack([rng.normal(2.0 * label - 1.0, 0.5), rng.normal(0.0, 1.0, n)], axis=1)
    c = label[:, None]
    data = split_of(x[:540], x[540:], c[:540], c[540:])
    p, _ = fit(init_flow(2, 1, "low", 0), data, TrainConfig(max_epoch=300))
    a = sample(p, 500, np.zeros(1), seed=1)[:, 0]
    b = sample(p, 500, np.ones(1), seed=2)[:, 0]
    wins = int(np.sum(b > a))
    assert stats.binomtest(wins, 500, 0.5, alternative="greater").pvalue < 0.01
