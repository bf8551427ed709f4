"""Local Descent APFL: client/server state, schedules, and the round engine.

Each client keeps a local model ``v``, a local copy ``w_local`` of the global
model, and a mixing weight ``alpha``; its personalized model is
``alpha * v + (1 - alpha) * w_local``. Every ``tau`` iterations the server
averages the selected clients' ``w_local``, samples a new set of ``K``
clients, and broadcasts the average to them.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import models
from .config import ExperimentConfig
from .datagen import FederatedDataset, Shard
from .numkit import RngStream, dot, ordered_mean

log = logging.getLogger(__name__)

# stream ids under the run seed
SELECTION_STREAM = 1
CLIENT_STREAM = 2
INIT_STREAM = 3


class NumericalError(RuntimeError):
    pass


class Batch(NamedTuple):
    X: np.ndarray
    y: np.ndarray


GradFn = Callable[[np.ndarray, Batch], np.ndarray]


def model_grad_fn(spec: models.ModelSpec) -> GradFn:
    def g(params, batch):
        return models.grad(spec, params, batch.X, batch.y)

    return g


def client_stream(seed: int, client_id: int) -> RngStream:
    """The minibatch stream of one client; stable across runs and worker counts."""
    return RngStream(seed).child(CLIENT_STREAM, client_id)


@dataclass
class WeightedAverage:
    S: float = 0.0
    acc: np.ndarray | None = None

    def add(self, x: np.ndarray, p: float = 1.0) -> None:
        if self.acc is None:
            self.acc = p * np.asarray(x, dtype=np.float64)
        else:
            self.acc += p * x
        self.S += p

    def finalize(self) -> np.ndarray:
        if self.S == 0 or self.acc is None:
            raise ValueError("weighted average of nothing")
        return self.acc / self.S


@dataclass
class LrSchedule:
    """Step sizes ``eta_t`` for ``t = 1, 2, ...`` and output weights ``p_t``.

    ``theory``: ``eta_t = scale / (mu * (t + a))`` with
    ``a = max(kappa_mult * kappa, tau)`` and ``p_t = (t + a)^2``.
    ``geometric``: ``eta_t = eta0 * (1 - decay)^(t-1)``, ``p_t = 1``.
    ``constant``: ``eta_t = eta``, ``p_t = 1``.
    """

    kind: str
    eta0: float = 0.1
    decay: float = 0.01
    eta: float = 0.05
    mu: float = 0.0
    kappa: float = 1.0
    tau: int = 1
    scale: float = 16.0
    kappa_mult: float = 128.0

    def __post_init__(self):
        if self.kind not in ("theory", "geometric", "constant"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.kind == "theory" and not self.mu > 0:
            raise ValueError(f"theory schedule needs mu > 0, got {self.mu}")

    @property
    def a(self) -> float:
        if self.kind != "theory":
            return 0.0
        return max(self.kappa_mult * self.kappa, float(self.tau))

    def __call__(self, t: int) -> float:
        if self.kind == "theory":
            return self.scale / (self.mu * (t + self.a))
        if self.kind == "geometric":
            return self.eta0 * (1.0 - self.decay) ** (t - 1)
        return self.eta

    def weight(self, t: int) -> float:
        if self.kind == "theory":
            return (t + self.a) ** 2
        return 1.0


@dataclass
class ClientState:
    id: int
    shard: Shard
    v: np.ndarray
    w_local: np.ndarray
    alpha: float
    alpha_mode: str = "fixed"
    rng: np.random.Generator | None = None
    out_acc_v: WeightedAverage = field(default_factory=WeightedAverage)
    step_count: int = 0

    @property
    def v_bar(self) -> np.ndarray:
        return self.alpha * self.v + (1.0 - self.alpha) * self.w_local


@dataclass
class ServerState:
    w: np.ndarray
    selection_rng: np.random.Generator
    t: int = 0
    current_selection: list[int] = field(default_factory=list)
    out_acc_w: WeightedAverage = field(default_factory=WeightedAverage)


def draw_batch(client: ClientState, batch_size: int) -> Batch:
    idx = client.shard.train_idx
    k = min(batch_size, idx.size)
    rows = idx[client.rng.choice(idx.size, size=k, replace=False)]
    return Batch(client.shard.features[rows], client.shard.labels[rows])


def update_alpha(client: ClientState, eta_t: float, batch: Batch, grad_fn: GradFn, g_vbar=None) -> ClientState:
    """One projected gradient step on the mixing weight.

    ``alpha <- clip(alpha - eta_t * <v - w_local, grad f(v_bar)>, 0, 1)``,
    evaluated at the current (pre-step) ``v`` and ``w_local``.
    """
    if g_vbar is None:
        g_vbar = grad_fn(client.v_bar, batch)
    corr = dot(client.v - client.w_local, g_vbar)
    client.alpha = float(min(1.0, max(0.0, client.alpha - eta_t * corr)))
    return client


def local_step(
    client: ClientState,
    eta_t: float,
    batch: Batch,
    grad_fn: GradFn,
    chain_rule: bool = True,
    update_w: bool = True,
    update_v: bool = True,
    g_vbar=None,
    alpha_for_v: float | None = None,
) -> ClientState:
    """Advance ``w_local`` and ``v`` by one SGD step on the same minibatch.

    The ``v`` gradient is taken through the mixture, so it carries the factor
    ``alpha`` unless ``chain_rule`` is off.
    """
    if not eta_t > 0:
        raise ValueError(f"eta_t must be positive, got {eta_t}")
    alpha = client.alpha if alpha_for_v is None else alpha_for_v
    new_v = client.v
    if update_v:
        if g_vbar is None:
            g_vbar = grad_fn(client.v_bar, batch)
        factor = alpha if chain_rule else 1.0
        new_v = client.v - eta_t * factor * g_vbar
    if update_w:
        client.w_local = client.w_local - eta_t * grad_fn(client.w_local, batch)
    client.v = new_v
    client.step_count += 1
    return client


def sample_clients(server: ServerState, K: int, n: int) -> list[int]:
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    sel = server.selection_rng.choice(n, size=K, replace=False)
    server.current_selection = sorted(int(i) for i in sel)
    return server.current_selection


def aggregate(server: ServerState, clients: Sequence[ClientState], selection: Sequence[int]) -> np.ndarray:
    if len(selection) == 0:
        raise ValueError("cannot aggregate an empty selection")
    server.w = ordered_mean([clients[j].w_local for j in sorted(selection)])
    return server.w


def broadcast(server: ServerState, clients: Sequence[ClientState], selection: Sequence[int]) -> None:
    for j in selection:
        clients[j].w_local = server.w.copy()


def aggregate_and_broadcast(server: ServerState, clients: Sequence[ClientState], selection: Sequence[int], K: int):
    """Average the selected local copies, resample ``K`` clients, broadcast."""
    aggregate(server, clients, selection)
    new_sel = sample_clients(server, K, len(clients))
    broadcast(server, clients, new_sel)
    return server, clients


@dataclass
class MetricsRow:
    round: int
    iteration: int
    pers_train_loss: float
    pers_val_acc: float
    locglob_train_loss: float
    locglob_val_acc: float
    global_val_acc: float
    mean_alpha: float
    wallclock_ms: float = 0.0


def evaluate(
    spec: models.ModelSpec,
    clients: Sequence[ClientState],
    server: ServerState,
    dataset: FederatedDataset,
    selection: Sequence[int] | None = None,
    round_: int = 0,
    iteration: int = 0,
) -> MetricsRow:
    """Client-averaged metrics of the personalized, localized and global models.

    Personalized and localized-global numbers average over ``selection``
    (the clients that just trained; all clients by default). The global
    model is scored on every client's validation rows.
    """
    ids = list(range(len(clients))) if selection is None else sorted(selection)
    pl, pa, ll, la = [], [], [], []
    for i in ids:
        c = clients[i]
        s = dataset.shards[i]
        Xt, yt, Xv, yv = s.X_train, s.y_train, s.X_val, s.y_val
        vbar = c.v_bar
        pl.append(models.loss(spec, vbar, Xt, yt))
        pa.append(models.accuracy(spec, vbar, Xv, yv))
        ll.append(models.loss(spec, c.w_local, Xt, yt))
        la.append(models.accuracy(spec, c.w_local, Xv, yv))
    ga = [models.accuracy(spec, server.w, s.X_val, s.y_val) for s in dataset.shards]
    return MetricsRow(
        round=round_,
        iteration=iteration,
        pers_train_loss=float(np.mean(pl)),
        pers_val_acc=float(np.mean(pa)),
        locglob_train_loss=float(np.mean(ll)),
        locglob_val_acc=float(np.mean(la)),
        global_val_acc=float(np.mean(ga)),
        mean_alpha=float(np.mean([c.alpha for c in clients])),
    )


@dataclass
class RunResult:
    rows: list[MetricsRow]
    w_final: np.ndarray
    w_hat: np.ndarray
    v_hat: list[np.ndarray]
    v_final: list[np.ndarray]
    alphas: list[float]
    schedule: LrSchedule
    resolved: dict
    round_models: list[np.ndarray] = field(default_factory=list)


def build_schedule(cfg: ExperimentConfig, spec: models.ModelSpec, dataset: FederatedDataset) -> LrSchedule:
    """Materialise the step-size schedule, deriving ``mu`` and ``kappa`` if unset.

    For logistic models ``mu`` defaults to the L2 strength and ``kappa`` to
    ``L / mu`` with ``L`` the analytic smoothness bound over all training rows.
    """
    mu, kappa = cfg.mu, cfg.kappa
    if cfg.lr_kind == "theory":
        if mu is None:
            mu = spec.l2_reg
        if kappa is None:
            L = max(models.smoothness_bound(spec, s.X_train) for s in dataset.shards)
            kappa = L / mu
    return LrSchedule(
        kind=cfg.lr_kind,
        eta0=cfg.eta0,
        decay=cfg.decay,
        eta=cfg.eta,
        mu=mu or 0.0,
        kappa=kappa or 1.0,
        tau=cfg.tau,
        scale=cfg.lr_scale,
        kappa_mult=cfg.kappa_mult,
    )


def model_spec(cfg: ExperimentConfig, dataset: FederatedDataset) -> models.ModelSpec:
    return models.ModelSpec(
        kind=cfg.model_kind,
        d_feat=dataset.d_feat,
        n_classes=dataset.n_classes,
        l2_reg=cfg.l2_reg,
        hidden_sizes=cfg.hidden_sizes,
    )


def _run_period(client: ClientState, t0: int, tau: int, sched: LrSchedule, cfg: ExperimentConfig, grad_fn: GradFn):
    """``tau`` local iterations of one client; returns per-step ``(w, v, alpha)``."""
    adaptive = client.alpha_mode == "adaptive"
    update_v = cfg.mode != "fedavg"
    update_w = cfg.mode != "local_only"
    traj = []
    for k in range(tau):
        t = t0 + k
        eta = sched(t)
        batch = draw_batch(client, cfg.batch_size)
        g_vbar = None
        alpha_used = client.alpha
        if update_v:
            g_vbar = grad_fn(client.v_bar, batch)
        if adaptive and (cfg.alpha_update_cadence == "per_step" or k == 0):
            update_alpha(client, eta, batch, grad_fn, g_vbar=g_vbar)
        local_step(
            client,
            eta,
            batch,
            grad_fn,
            chain_rule=cfg.chain_rule,
            update_w=update_w,
            update_v=update_v,
            g_vbar=g_vbar,
            alpha_for_v=alpha_used,
        )
        if not (np.all(np.isfinite(client.v)) and np.all(np.isfinite(client.w_local))):
            raise NumericalError(f"iteration {t}: client {client.id} produced non-finite parameters")
        traj.append((client.w_local, client.v, client.alpha))
    return traj


def init_run(cfg: ExperimentConfig, dataset: FederatedDataset):
    spec = model_spec(cfg, dataset)
    w0 = models.init_params(spec, RngStream(cfg.seed).child(INIT_STREAM).generator())
    server = ServerState(w=w0.copy(), selection_rng=RngStream(cfg.seed).child(SELECTION_STREAM).generator())
    clients = [
        ClientState(
            id=i,
            shard=dataset.shards[i],
            v=w0.copy(),
            w_local=w0.copy(),
            alpha=cfg.alpha_value,
            alpha_mode=cfg.alpha_mode,
            rng=client_stream(cfg.seed, i).generator(),
        )
        for i in range(cfg.n)
    ]
    return spec, server, clients


def run_experiment(
    cfg: ExperimentConfig,
    dataset: FederatedDataset,
    on_iteration: Callable[[int, dict, np.ndarray], None] | None = None,
    keep_round_models: bool = False,
) -> RunResult:
    """Run ``T`` iterations of Local Descent APFL (or a baseline) on ``dataset``.

    Iteration ``t`` (1-based) takes one minibatch step on every selected
    client; after every ``tau``-th iteration the server aggregates, a metrics
    row is emitted every ``eval_every`` rounds, and new clients are
    broadcast to. Output averages weight iterate ``t`` by ``p_t``.
    ``on_iteration(t, states, w_mean)`` sees, per iteration, the selected
    clients' ``{id: (w_local, v, alpha)}`` and their mean ``w_local``.
    """
    if dataset.n_clients != cfg.n:
        raise ValueError(f"dataset has {dataset.n_clients} clients but config n={cfg.n}")
    spec, server, clients = init_run(cfg, dataset)
    grad_fn = model_grad_fn(spec)
    sched = build_schedule(cfg, spec, dataset)
    n, K, tau = cfg.n, cfg.K, cfg.tau
    communicate = cfg.mode != "local_only"
    selection = list(range(n)) if not communicate else sample_clients(server, K, n)
    v_acc = [WeightedAverage() for _ in range(n)]
    rows: list[MetricsRow] = []
    round_models: list[np.ndarray] = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    start = time.perf_counter()

    try:
        t = 0
        rnd = 0
        while t < cfg.T:
            span = min(tau, cfg.T - t)
            t0 = t + 1
            work = [clients[i] for i in selection]
            if pool is None:
                trajs = [_run_period(c, t0, span, sched, cfg, grad_fn) for c in work]
            else:
                trajs = list(pool.map(lambda c: _run_period(c, t0, span, sched, cfg, grad_fn), work))
            by_id = dict(zip(selection, trajs))
            for k in range(span):
                tk = t0 + k
                p = sched.weight(tk)
                w_mean = ordered_mean([by_id[j][k][0] for j in selection])
                server.out_acc_w.add(w_mean, p)
                for i in range(n):
                    if i in by_id:
                        _, v_i, a_i = by_id[i][k]
                    else:
                        v_i, a_i = clients[i].v, clients[i].alpha
                    v_acc[i].add(a_i * v_i + (1.0 - a_i) * w_mean, p)
                if on_iteration is not None:
                    on_iteration(tk, {j: by_id[j][k] for j in selection}, w_mean)
            t += span
            server.t = t
            if span < tau:
                break
            rnd += 1
            if communicate:
                aggregate(server, clients, selection)
            if keep_round_models:
                round_models.append(server.w.copy())
            if rnd % cfg.eval_every == 0:
                row = evaluate(spec, clients, server, dataset, selection, rnd, t)
                if cfg.record_wallclock:
                    row.wallclock_ms = (time.perf_counter() - start) * 1e3
                rows.append(row)
                log.debug("round %d: %s", rnd, row)
            if communicate:
                selection = sample_clients(server, K, n)
                broadcast(server, clients, selection)
    finally:
        if pool is not None:
            pool.shutdown()

    for i, c in enumerate(clients):
        c.out_acc_v = v_acc[i]
    resolved = {"lr.mu": sched.mu, "lr.kappa": sched.kappa, "lr.a": sched.a} if sched.kind == "theory" else {}
    return RunResult(
        rows=rows,
        w_final=server.w.copy(),
        w_hat=server.out_acc_w.finalize(),
        v_hat=[acc.finalize() for acc in v_acc],
        v_final=[c.v.copy() for c in clients],
        alphas=[c.alpha for c in clients],
        schedule=sched,
        resolved=resolved,
        round_models=round_models,
    )


def personalize_new_client(
    spec: models.ModelSpec,
    global_model: np.ndarray,
    shard: Shard,
    alpha: float,
    epochs: int,
    lr: float,
    batch_size: int = 20,
    rng: np.random.Generator | None = None,
    chain_rule: bool = True,
) -> np.ndarray:
    """Adapt a frozen global model to a newcomer's shard.

    Starts ``v`` at the global model, runs ``epochs`` passes of minibatch SGD
    on ``v`` through the mixture ``alpha * v + (1 - alpha) * w_global``, and
    returns that mixture.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    if epochs < 1:
        raise ValueError(f"epochs={epochs} must be >= 1")
    if rng is None:
        rng = RngStream(0).child(0xA11CE, shard.client_id).generator()
    w = np.asarray(global_model, dtype=np.float64)
    v = w.copy()
    factor = alpha if chain_rule else 1.0
    idx = shard.train_idx
    for _ in range(epochs):
        order = idx[rng.permutation(idx.size)]
        for s in range(0, order.size, batch_size):
            rows = order[s : s + batch_size]
            mixed = alpha * v + (1.0 - alpha) * w
            v = v - lr * factor * models.grad(spec, mixed, shard.features[rows], shard.labels[rows])
    return alpha * v + (1.0 - alpha) * w
