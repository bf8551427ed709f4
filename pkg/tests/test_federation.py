import math

import numpy as np
import pytest

from apfl import models
from apfl.config import ExperimentConfig
from apfl.datagen import FederatedDataset, Shard, gen_synthetic, split_dataset
from apfl.federation import (
    Batch,
    ClientState,
    LrSchedule,
    ServerState,
    WeightedAverage,
    aggregate,
    aggregate_and_broadcast,
    evaluate,
    local_step,
    personalize_new_client,
    run_experiment,
    sample_clients,
    update_alpha,
)
from apfl.numkit import RngStream


def identity_grad(p, batch):
    # gradient of 0.5 * ||x||^2
    return np.asarray(p, dtype=np.float64)


def _dummy_shard(cid=0):
    return Shard(cid, np.zeros((2, 1)), np.zeros(2, dtype=int), np.arange(2))


def _client(v, w, alpha, cid=0):
    return ClientState(cid, _dummy_shard(cid), np.array(v, float), np.array(w, float), alpha)


BATCH = Batch(np.zeros((1, 1)), np.zeros(1, dtype=int))


def test_local_step_hand_example():
    c = _client([2.0], [2.0], 0.5)
    local_step(c, 0.1, BATCH, identity_grad)
    assert c.v[0] == pytest.approx(1.9, abs=1e-15)
    assert c.w_local[0] == pytest.approx(1.8, abs=1e-15)


def test_local_step_alpha_zero_freezes_v():
    c = _client([3.0, -1.0], [1.0, 1.0], 0.0)
    local_step(c, 0.2, BATCH, identity_grad)
    assert c.v.tolist() == [3.0, -1.0]
    assert np.array_equal(c.v_bar, c.w_local)


def test_local_step_alpha_one_is_plain_sgd():
    c = _client([3.0], [10.0], 1.0)
    local_step(c, 0.25, BATCH, identity_grad)
    assert c.v[0] == 3.0 - 0.25 * 3.0


def test_local_step_rejects_nonpositive_eta():
    with pytest.raises(ValueError):
        local_step(_client([1.0], [1.0], 0.5), 0.0, BATCH, identity_grad)


def test_update_alpha_examples():
    c = _client([1.0, 2.0], [1.0, 2.0], 0.3)
    update_alpha(c, 0.5, BATCH, identity_grad)
    assert c.alpha == 0.3

    c = _client([1.0, 0.0], [0.0, 0.0], 0.5)
    update_alpha(c, 0.1, BATCH, identity_grad, g_vbar=np.array([1.0, 0.0]))
    assert c.alpha == pytest.approx(0.4, abs=1e-15)

    c = _client([1.0], [0.0], 0.05)
    update_alpha(c, 0.1, BATCH, identity_grad, g_vbar=np.array([1.0]))
    assert c.alpha == 0.0

    c = _client([1.0], [0.0], 0.95)
    update_alpha(c, 0.1, BATCH, identity_grad, g_vbar=np.array([-1.0]))
    assert c.alpha == 1.0


def _server(seed=0, w=(0.0,)):
    return ServerState(np.array(w, float), RngStream(seed).generator())


def test_sample_clients_full_and_single():
    assert sample_clients(_server(), 5, 5) == [0, 1, 2, 3, 4]
    assert sample_clients(_server(), 1, 1) == [0]
    with pytest.raises(ValueError):
        sample_clients(_server(), 0, 3)
    with pytest.raises(ValueError):
        sample_clients(_server(), 4, 3)


def test_sample_frequencies():
    srv = _server(seed=123)
    counts = np.zeros(10)
    for _ in range(10_000):
        counts[sample_clients(srv, 3, 10)] += 1
    assert np.all(np.abs(counts / 10_000 - 0.3) <= 0.02)


def test_aggregate_examples():
    u = [0.5, -1.5]
    clients = [_client([0.0, 0.0], u, 0.5, cid=i) for i in range(3)]
    srv = _server(w=(9.0, 9.0))
    assert aggregate(srv, clients, [0, 1, 2]).tolist() == u

    clients = [_client([0.0], [0.0], 0.5, 0), _client([0.0], [2.0], 0.5, 1)]
    assert aggregate(_server(), clients, [0, 1]).tolist() == [1.0]
    with pytest.raises(ValueError):
        aggregate(_server(), clients, [])


def test_broadcast_only_touches_new_selection():
    clients = [_client([float(i)], [float(i)], 0.5, i) for i in range(6)]
    srv = _server(seed=4)
    aggregate_and_broadcast(srv, clients, [0, 1, 2, 3, 4, 5], 2)
    mean = 2.5
    for i, c in enumerate(clients):
        assert c.v[0] == float(i)
        expected = mean if i in srv.current_selection else float(i)
        assert c.w_local[0] == expected


def test_weighted_average():
    acc = WeightedAverage()
    with pytest.raises(ValueError):
        acc.finalize()
    acc.add(np.array([1.0]), 1.0)
    acc.add(np.array([4.0]), 2.0)
    assert acc.finalize().tolist() == [3.0]


def test_theory_schedule():
    s = LrSchedule("theory", mu=0.5, kappa=2.0, tau=10)
    assert s.a == 256.0
    assert s(1) == 16 / (0.5 * 257)
    assert s.weight(4) == 260.0**2
    assert LrSchedule("theory", mu=1.0, kappa=0.01, tau=10).a == 10.0
    g = LrSchedule("geometric", eta0=0.2, decay=0.5)
    assert (g(1), g(3), g.weight(3)) == (0.2, 0.05, 1.0)
    with pytest.raises(ValueError):
        LrSchedule("theory", mu=0.0)


def _small_ds(gamma=0.0, beta=0.0, n=4, seed=0, d=5, c=3, m=40):
    return split_dataset(gen_synthetic(gamma, beta, n, m, d, c, seed=seed), 0.25, seed)


def _cfg(**kw):
    base = dict(n=4, K=4, tau=5, T=50, d_feat=5, n_classes=3, per_client=40, val_fraction=0.25)
    base.update(kw)
    return ExperimentConfig(**base)


def test_synchronized_sgd_when_tau_one():
    ds = _small_ds()
    cfg = _cfg(tau=1, T=12, mode="fedavg", alpha_mode="fixed", alpha_value=0.0)
    seen = []

    def hook(t, states, w_mean):
        seen.append(t)

    res = run_experiment(cfg, ds, on_iteration=hook)
    assert seen == list(range(1, 13))
    assert len(res.rows) == 12


def test_tau_one_k_equals_n_keeps_copies_equal():
    from apfl.federation import init_run, draw_batch, model_grad_fn

    ds = _small_ds()
    cfg = _cfg(tau=1, T=8)
    spec, srv, clients = init_run(cfg, ds)
    g = model_grad_fn(spec)
    sel = sample_clients(srv, cfg.K, cfg.n)
    for t in range(1, 9):
        for c in clients:
            local_step(c, 0.1, draw_batch(c, 5), g)
        aggregate_and_broadcast(srv, clients, sel, cfg.K)
        sel = srv.current_selection
        for c in clients[1:]:
            assert np.array_equal(c.w_local, clients[0].w_local)


def test_all_zero_params_evaluate():
    ds = _small_ds()
    cfg = _cfg()
    spec = models.ModelSpec("logistic", 5, 3)
    z = np.zeros(spec.n_params)
    clients = [ClientState(i, ds.shards[i], z.copy(), z.copy(), 0.5) for i in range(4)]
    row = evaluate(spec, clients, _server(w=z), ds)
    assert row.pers_train_loss == pytest.approx(math.log(3))
    assert row.locglob_train_loss == pytest.approx(math.log(3))
    freq0 = np.mean([np.mean(s.y_val == 0) for s in ds.shards])
    assert row.pers_val_acc == pytest.approx(freq0)
    assert row.global_val_acc == pytest.approx(freq0)
    assert row.mean_alpha == 0.5
    assert cfg.rounds == 10


def test_alpha_zero_personal_equals_localized():
    res = run_experiment(_cfg(alpha_mode="fixed", alpha_value=0.0), _small_ds())
    for r in res.rows:
        assert r.pers_train_loss == r.locglob_train_loss
        assert r.pers_val_acc == r.locglob_val_acc


def test_separable_single_client_reaches_full_accuracy():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((200, 2))
    X[:, 0] += np.where(rng.random(200) < 0.5, 3.0, -3.0)
    y = (X[:, 0] > 0).astype(int)
    ds = split_dataset(FederatedDataset([Shard(0, X, y, np.arange(200))], 2, 2), 0.2, 0)
    cfg = ExperimentConfig(
        n=1, K=1, tau=10, T=2000, mode="local_only", alpha_mode="fixed", alpha_value=1.0,
        d_feat=2, n_classes=2, l2_reg=1e-3, lr_kind="constant", eta=0.5,
    )
    res = run_experiment(cfg, ds)
    assert res.rows[-1].pers_val_acc == 1.0


def test_run_deterministic_and_alpha_bounded():
    ds = _small_ds(1.0, 1.0)
    cfg = _cfg(alpha_mode="adaptive", alpha_value=0.01, lr_kind="constant", eta=0.5, alpha_update_cadence="per_step")
    alphas = []
    a = run_experiment(cfg, ds, on_iteration=lambda t, s, w: alphas.extend(x[2] for x in s.values()))
    b = run_experiment(cfg, ds)
    assert a.rows == b.rows
    assert all(0.0 <= x <= 1.0 for x in alphas)


def test_partial_participation_leaves_idle_clients_alone():
    ds = _small_ds(n=6)
    cfg = _cfg(n=6, K=2, T=25)
    selected = set()
    run_experiment(cfg, ds, on_iteration=lambda t, s, w: selected.update(s))
    assert selected <= set(range(6))


def test_dataset_size_mismatch():
    with pytest.raises(ValueError, match="n=5"):
        run_experiment(_cfg(n=5, K=5), _small_ds())


def test_personalize_alpha_zero_returns_global():
    ds = _small_ds()
    spec = models.ModelSpec("logistic", 5, 3)
    w = np.random.default_rng(0).standard_normal(spec.n_params)
    out = personalize_new_client(spec, w, ds.shards[0], 0.0, 3, 0.1)
    assert np.array_equal(out, w)


def test_personalize_at_optimum_stays_put():
    spec = models.ModelSpec("logistic", 5, 3, l2_reg=0.1)
    s = _small_ds().shards[0]
    # a single full-shard batch makes the step deterministic; at the shard minimizer the gradient vanishes
    obj = models.ShardObjective(spec, s.X_train, s.y_train)
    w_star, _, _ = models.minimize_full_batch(obj, np.zeros(spec.n_params), tol=1e-12)
    out = personalize_new_client(spec, w_star, s, 0.5, 2, 0.1, batch_size=s.train_idx.size)
    assert np.max(np.abs(out - w_star)) <= 1e-12


def test_personalize_validation():
    spec = models.ModelSpec("logistic", 5, 3)
    s = _small_ds().shards[0]
    with pytest.raises(ValueError):
        personalize_new_client(spec, np.zeros(spec.n_params), s, 1.5, 1, 0.1)
    with pytest.raises(ValueError):
        personalize_new_client(spec, np.zeros(spec.n_params), s, 0.5, 0, 0.1)
