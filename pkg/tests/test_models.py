import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apfl import models
from apfl.datagen import gen_synthetic, synthetic_client_params
from apfl.models import ModelError, ModelSpec


def _batch(rng, m, d, c):
    return rng.standard_normal((m, d)), rng.integers(0, c, size=m)


def test_param_count_from_fields():
    assert ModelSpec("logistic", 20, 10).n_params == 20 * 10 + 10
    mlp = ModelSpec("mlp", 4, 3, hidden_sizes=(5, 6))
    assert mlp.n_params == (4 * 5 + 5) + (5 * 6 + 6) + (6 * 3 + 3)


@pytest.mark.parametrize("c", [2, 3, 10])
@pytest.mark.parametrize("lam", [0.0, 0.5])
def test_zero_params_loss_is_log_c(c, lam):
    rng = np.random.default_rng(c)
    spec = ModelSpec("logistic", 4, c, l2_reg=lam)
    X, y = _batch(rng, 7, 4, c)
    assert models.loss(spec, np.zeros(spec.n_params), X, y) == pytest.approx(math.log(c), abs=1e-15)


def test_binary_zero_params_ln2():
    spec = ModelSpec("logistic", 3, 2)
    X = np.ones((2, 3))
    assert models.loss(spec, np.zeros(spec.n_params), X, [0, 1]) == pytest.approx(0.6931471805599453)


def test_one_sample_cross_entropy_by_hand():
    # 3 classes, no features used: bias puts 10 on the correct class
    spec = ModelSpec("logistic", 1, 3, l2_reg=0.0)
    params = np.zeros(spec.n_params)
    params[1 * 3 + 2] = 10.0  # bias of class 2 (W is 1x3, then b)
    expected = -10.0 + math.log(math.exp(10.0) + 2.0)
    assert models.loss(spec, params, np.zeros((1, 1)), [2]) == pytest.approx(expected, rel=1e-14)


def test_regularizer_value():
    spec = ModelSpec("logistic", 2, 2, l2_reg=0.3)
    p = np.arange(1.0, spec.n_params + 1)
    X = np.zeros((1, 2))
    # with zero features the data term is the softmax of the bias only
    b = p[4:]
    data = -b[0] + math.log(math.exp(b[0]) + math.exp(b[1]))
    assert models.loss(spec, p, X, [0]) == pytest.approx(data + 0.15 * np.dot(p, p))


def test_symmetric_binary_batch_zero_gradient():
    spec = ModelSpec("logistic", 3, 2, l2_reg=0.1)
    x = np.array([0.3, -1.2, 2.0])
    X = np.stack([x, -x, x, -x])
    y = np.array([0, 1, 1, 0])
    g = models.grad(spec, np.zeros(spec.n_params), X, y)
    assert np.max(np.abs(g)) <= 1e-15


def test_loss_errors():
    spec = ModelSpec("logistic", 3, 2)
    with pytest.raises(ValueError):
        models.loss(spec, np.zeros(5), np.zeros((1, 3)), [0])
    with pytest.raises(ModelError):
        models.loss(spec, np.zeros(spec.n_params), np.zeros((1, 3)), [2])
    with pytest.raises(ValueError):
        models.loss(spec, np.zeros(spec.n_params), np.zeros((1, 4)), [0])


def test_predict_ties_and_argmax():
    spec = ModelSpec("logistic", 1, 3, l2_reg=0.0)
    assert models.predict(spec, np.zeros(spec.n_params), np.ones((4, 1))).tolist() == [0, 0, 0, 0]
    p = np.array([0.0, 0.0, 0.0, 0.0, 5.0, 1.0])  # W = 0, b = (0, 5, 1)
    assert models.logits(spec, p, np.zeros((1, 1)))[0].tolist() == [0.0, 5.0, 1.0]
    assert models.predict(spec, p, np.zeros((1, 1))).tolist() == [1]


def test_generator_model_beats_zero_params():
    cid, seed, d, c = 3, 5, 10, 4
    ds = gen_synthetic(1.0, 1.0, 5, 300, d, c, seed=seed)
    shard = ds.shards[cid]
    gp = synthetic_client_params(1.0, 1.0, d, c, seed, cid)
    spec = ModelSpec("logistic", d, c)
    own = np.concatenate([np.asarray(gp["W"]).ravel(), np.asarray(gp["b"]).ravel()])
    assert models.accuracy(spec, own, shard.features, shard.labels) == 1.0
    assert models.accuracy(spec, own, shard.features, shard.labels) >= models.accuracy(
        spec, np.zeros(spec.n_params), shard.features, shard.labels
    )


def test_minimizer_has_tiny_gradient():
    rng = np.random.default_rng(1)
    spec = ModelSpec("logistic", 5, 3, l2_reg=0.1)
    X, y = _batch(rng, 60, 5, 3)
    obj = models.ShardObjective(spec, X, y)
    x, gnorm, _ = models.minimize_full_batch(obj, np.zeros(spec.n_params), tol=1e-9)
    assert gnorm <= 1e-9
    assert np.linalg.norm(models.grad(spec, x, X, y)) <= 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_fd_logistic(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec("logistic", 4, 3, l2_reg=0.05)
    X, y = _batch(rng, 8, 4, 3)
    assert models.fd_check(spec, rng.standard_normal(spec.n_params), X, y) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_fd_mlp(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec("mlp", 4, 3, hidden_sizes=(6, 5))
    X, y = _batch(rng, 8, 4, 3)
    p = models.init_params(spec, rng) + 0.1 * rng.standard_normal(spec.n_params)
    # stay clear of the ReLU kink (zero-bias init can put it exactly at 0)
    while models.relu_margin(spec, p, X) < 1e-3:
        p = models.init_params(spec, rng) + 0.1 * rng.standard_normal(spec.n_params)
    assert models.fd_check(spec, p, X, y) <= 1e-4


def test_relu_margin_detects_kink():
    spec = ModelSpec("mlp", 2, 2, hidden_sizes=(3,))
    assert models.relu_margin(spec, np.zeros(spec.n_params), np.ones((1, 2))) == 0.0
    assert models.relu_margin(ModelSpec("logistic", 2, 2), np.zeros(6), np.ones((1, 2))) == np.inf


def test_fd_rejects_nonpositive_epsilon():
    spec = ModelSpec("logistic", 2, 2)
    with pytest.raises(ValueError):
        models.fd_check(spec, np.zeros(spec.n_params), np.zeros((1, 2)), [0], epsilon=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.99))
def test_strong_convexity_inequality(seed, theta):
    rng = np.random.default_rng(seed)
    lam = 0.2
    spec = ModelSpec("logistic", 3, 3, l2_reg=lam)
    X, y = _batch(rng, 10, 3, 3)
    a, b = rng.standard_normal((2, spec.n_params))
    lhs = models.loss(spec, theta * a + (1 - theta) * b, X, y)
    rhs = theta * models.loss(spec, a, X, y) + (1 - theta) * models.loss(spec, b, X, y)
    rhs -= 0.5 * lam * theta * (1 - theta) * np.dot(a - b, a - b)
    assert lhs <= rhs + 1e-12


def test_minibatch_gradients_average_to_full():
    rng = np.random.default_rng(2)
    spec = ModelSpec("logistic", 4, 3, l2_reg=0.1)
    X, y = _batch(rng, 40, 4, 3)
    p = rng.standard_normal(spec.n_params)
    full = models.grad(spec, p, X, y)
    parts = [models.grad(spec, p, X[i : i + 10], y[i : i + 10]) for i in range(0, 40, 10)]
    assert np.allclose(np.mean(parts, axis=0), full, rtol=0, atol=1e-14)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    spec = ModelSpec("logistic", 4, 3, l2_reg=0.0)
    X, y = _batch(rng, 12, 4, 3)
    p = rng.standard_normal(spec.n_params)
    shifted = p.copy()
    shifted[-3:] += 7.5  # same constant on every class bias
    assert abs(models.loss(spec, p, X, y) - models.loss(spec, shifted, X, y)) <= 1e-12
    assert np.array_equal(models.predict(spec, p, X), models.predict(spec, shifted, X))


def test_mlp_has_no_regularizer():
    spec = ModelSpec("mlp", 2, 2, l2_reg=5.0, hidden_sizes=(3,))
    # zero weights: every logit is zero, so the loss is exactly ln 2 with no penalty
    assert models.loss(spec, np.zeros(spec.n_params), np.ones((3, 2)), [0, 1, 1]) == pytest.approx(math.log(2))


def test_smoothness_bound_dominates_hessian_curvature():
    rng = np.random.default_rng(4)
    spec = ModelSpec("logistic", 3, 3, l2_reg=0.1)
    X, y = _batch(rng, 20, 3, 3)
    L = models.smoothness_bound(spec, X)
    for _ in range(20):
        a, b = rng.standard_normal((2, spec.n_params))
        ga, gb = models.grad(spec, a, X, y), models.grad(spec, b, X, y)
        assert np.linalg.norm(ga - gb) <= L * np.linalg.norm(a - b) * (1 + 1e-12)
