"""Heterogeneity estimates and generalization-bound arithmetic.

The supremum-type quantities (gradient diversity, gradient discrepancy,
hypothesis disagreement) are estimated as maxima over finite probe sets, so
every estimate here is a lower bound on the true supremum.

Objectives passed in need ``grad(params)``; ``estimate_delta`` also needs
``smoothness`` and ``strong_convexity`` attributes (see
:class:`apfl.models.ShardObjective`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datagen import label_histogram
from .models import MeanObjective, minimize_full_batch
from .numkit import RngStream


class DiagnosticsError(ValueError):
    pass


@dataclass
class DiversityReport:
    zeta_i: list[float] = field(default_factory=list)
    zeta: float = 0.0
    delta_i: list[float] = field(default_factory=list)
    gamma: float = 0.0
    lambda_i: list[float] = field(default_factory=list)
    l1_div_proxy_i: list[float] = field(default_factory=list)
    probes_used: int = 0
    gd_tolerance: float = 0.0
    gd_grad_norms: list[float] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _sq(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def estimate_zeta(objectives: Sequence, probe_points: Sequence[np.ndarray]) -> tuple[list[float], float]:
    """Per-client ``max_w ||grad F(w) - grad f_i(w)||^2`` over the probes, and their sum."""
    if len(probe_points) == 0:
        raise DiagnosticsError("probe set is empty")
    if len(objectives) == 0:
        raise DiagnosticsError("no client objectives")
    zeta_i = [0.0] * len(objectives)
    for w in probe_points:
        grads = [obj.grad(w) for obj in objectives]
        gF = grads[0].copy()
        for g in grads[1:]:
            gF += g
        gF /= len(grads)
        for i, g in enumerate(grads):
            zeta_i[i] = max(zeta_i[i], _sq(gF - g))
    return zeta_i, math.fsum(zeta_i)


def estimate_delta(objectives: Sequence, gd_tolerance: float = 1e-10, x0=None):
    """``||v_i* - w*||^2`` per client, optima from full-batch descent.

    Returns ``(delta_i, local_optima, global_optimum, grad_norms)``; the
    last entry of ``grad_norms`` belongs to the global solve.
    """
    if len(objectives) == 0:
        raise DiagnosticsError("no client objectives")
    for k, obj in enumerate(objectives):
        if not getattr(obj, "strong_convexity", 0.0) > 0:
            raise DiagnosticsError(f"objective {k} is not strongly convex; minimizers are not unique")
    if x0 is None:
        x0 = np.zeros(objectives[0].dim)
    norms = []
    local = []
    for obj in objectives:
        x, gn, _ = minimize_full_batch(obj, x0, tol=gd_tolerance)
        local.append(x)
        norms.append(gn)
    w_star, gn, _ = minimize_full_batch(MeanObjective(objectives), x0, tol=gd_tolerance)
    norms.append(gn)
    return [_sq(v - w_star) for v in local], local, w_star, norms


def estimate_gamma(objective, probe_pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """``max ||grad F(x1) - grad F(x2)||^2`` over the given pairs."""
    if len(probe_pairs) == 0:
        raise DiagnosticsError("probe set is empty")
    return max(_sq(objective.grad(a) - objective.grad(b)) for a, b in probe_pairs)


def _disagreement(X: np.ndarray, u: np.ndarray) -> float:
    return float(np.mean(np.abs(X @ u)))


def estimate_lambda_H(
    X, R: float = 1.0, n_directions: int = 16, ascent_steps: int = 20, seed: int = 0
) -> float:
    """Worst mean disagreement of two linear hypotheses with ``||w|| <= R``.

    For linear hypotheses this is ``2R * max_{||u||=1} mean |u . x|``. Each
    random start alternates ``s = sign(X u)`` and ``u = X^T s / ||X^T s||``,
    which never decreases the objective.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DiagnosticsError("empty shard")
    if n_directions < 1:
        raise DiagnosticsError(f"n_directions must be >= 1, got {n_directions}")
    rng = RngStream(seed).child(0x1A4B).generator()
    best = 0.0
    starts = [row for row in X[np.argsort(-np.sum(X * X, axis=1))[:1]]]
    starts += list(rng.standard_normal((n_directions, X.shape[1])))
    for u in starts:
        nu = np.linalg.norm(u)
        if nu == 0:
            continue
        u = u / nu
        val = _disagreement(X, u)
        for _ in range(ascent_steps):
            s = np.sign(X @ u)
            s[s == 0] = 1.0
            z = X.T @ s
            nz = np.linalg.norm(z)
            if nz == 0:
                break
            u_new = z / nz
            new_val = _disagreement(X, u_new)
            if new_val <= val:
                break
            u, val = u_new, new_val
        best = max(best, val)
    return 2.0 * R * best


def l1_divergence_proxy(labels_i, pooled_labels, n_classes: int) -> float:
    """L1 distance between the shard's and the pooled label histograms.

    Only the label marginal is compared, so this is a proxy for the joint
    distribution distance, not the distance itself.
    """
    labels_i = np.asarray(labels_i)
    pooled_labels = np.asarray(pooled_labels)
    if labels_i.size == 0 or pooled_labels.size == 0:
        raise DiagnosticsError("empty shard")
    return float(np.abs(label_histogram(labels_i, n_classes) - label_histogram(pooled_labels, n_classes)).sum())


@dataclass
class GeneralizationInputs:
    alpha: float = 0.5
    global_emp_risk: float = 0.0
    l1_div: float = 0.0
    local_opt_risk: float = 0.0
    d_vc: float = 1.0
    delta_conf: float = 0.05
    m_total: int = 1
    m_local: int = 1
    C: float = 1.0
    B: float = 1.0
    G: float = 1.0
    lambda_S: float = 0.0

    def validate(self) -> None:
        for name in ("global_emp_risk", "l1_div", "local_opt_risk", "d_vc", "C", "B", "G", "lambda_S"):
            if getattr(self, name) < 0:
                raise DiagnosticsError(f"{name}={getattr(self, name)} must be >= 0")
        if not 0 < self.delta_conf < 1:
            raise DiagnosticsError(f"delta_conf={self.delta_conf} must be in (0, 1)")
        if not self.m_total >= self.m_local >= 1:
            raise DiagnosticsError(f"need m_total >= m_local >= 1, got {self.m_total}, {self.m_local}")
        if not 0 <= self.alpha <= 1:
            raise DiagnosticsError(f"alpha={self.alpha} outside [0, 1]")


def _capacity(inp: GeneralizationInputs, m: float) -> float:
    return math.sqrt((inp.d_vc + math.log(1.0 / inp.delta_conf)) / m)


def global_term(inp: GeneralizationInputs) -> float:
    """Risk proxy of the global model on client ``i``'s distribution."""
    return inp.global_emp_risk + inp.B * inp.l1_div + inp.C * _capacity(inp, inp.m_total)


def local_term(inp: GeneralizationInputs) -> float:
    return inp.local_opt_risk + 2.0 * inp.C * _capacity(inp, inp.m_local) + inp.G * inp.lambda_S


def optimal_alpha(inp: GeneralizationInputs) -> float:
    inp.validate()
    a, b = global_term(inp), local_term(inp)
    if a + b <= 0:
        raise DiagnosticsError("both bound terms are zero; optimal alpha is undefined")
    return a / (a + b)


def mixture_risk_bound(inp: GeneralizationInputs, alpha: float | None = None) -> float:
    """``2(1-alpha)^2 * global_term + 2 alpha^2 * local_term``."""
    inp.validate()
    al = inp.alpha if alpha is None else alpha
    if not 0 <= al <= 1:
        raise DiagnosticsError(f"alpha={al} outside [0, 1]")
    return 2.0 * (1.0 - al) ** 2 * global_term(inp) + 2.0 * al**2 * local_term(inp)


def personalization_gap(inp: GeneralizationInputs, C2: float, alpha: float | None = None) -> float:
    """Upper bound on risk(personalized) - risk(local ERM)."""
    inp.validate()
    if not C2 > 0:
        raise DiagnosticsError(f"C2={C2} must be > 0")
    al = inp.alpha if alpha is None else alpha
    a2 = al * al
    return (
        (2 * a2 - 1) * inp.local_opt_risk
        + (2 * a2 * inp.C - C2) * _capacity(inp, inp.m_local)
        + 2 * a2 * inp.G * inp.lambda_S
        + 2 * (1 - al) ** 2 * global_term(inp)
    )


def gaussian_probes(dim: int, count: int, scale: float = 1.0, seed: int = 0) -> list[np.ndarray]:
    rng = RngStream(seed).child(0x9B0B).generator()
    return [scale * rng.standard_normal(dim) for _ in range(count)]


def diversity_report(
    objectives: Sequence,
    trajectory: Sequence[np.ndarray] = (),
    n_random: int = 8,
    random_scale: float = 1.0,
    gd_tolerance: float = 1e-8,
    shards_X: Sequence[np.ndarray] | None = None,
    shard_labels: Sequence[np.ndarray] | None = None,
    n_classes: int | None = None,
    lambda_R: float = 1.0,
    seed: int = 0,
) -> DiversityReport:
    """All heterogeneity quantities for one federation.

    Probes are the trajectory iterates, ``n_random`` Gaussian points and,
    when every objective is strongly convex, the local and global optima.
    """
    dim = objectives[0].dim
    probes = list(trajectory) + gaussian_probes(dim, n_random, random_scale, seed)
    rep = DiversityReport(gd_tolerance=gd_tolerance)
    if all(getattr(o, "strong_convexity", 0.0) > 0 for o in objectives):
        delta_i, local, w_star, norms = estimate_delta(objectives, gd_tolerance)
        rep.delta_i, rep.gd_grad_norms = delta_i, norms
        probes += local + [w_star]
    else:
        rep.notes["delta"] = "skipped: objectives are not strongly convex"
    rep.zeta_i, rep.zeta = estimate_zeta(objectives, probes)
    F = MeanObjective(objectives)
    pairs = [(probes[i], probes[j]) for i in range(len(probes)) for j in range(i + 1, len(probes))]
    rep.gamma = estimate_gamma(F, pairs) if pairs else 0.0
    rep.probes_used = len(probes)
    if shards_X is not None:
        rep.lambda_i = [estimate_lambda_H(X, lambda_R, seed=seed) for X in shards_X]
    if shard_labels is not None and n_classes is not None:
        pooled = np.concatenate(list(shard_labels))
        rep.l1_div_proxy_i = [l1_divergence_proxy(y, pooled, n_classes) for y in shard_labels]
        rep.notes["l1_div_proxy"] = "label-histogram L1 distance; proxy for the joint-distribution distance"
    return rep
