"""Local objectives: multinomial logistic regression and a ReLU MLP.

Both models read a flat parameter vector. Logistic layout is ``W`` (d x c,
row-major) followed by ``b`` (c). The MLP stores, per layer, its weight
matrix (fan_in x fan_out, row-major) then its bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import DimensionError


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    d_feat: int
    n_classes: int
    l2_reg: float = 1e-2
    hidden_sizes: tuple[int, ...] = field(default=(200, 200))

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.d_feat < 1 or self.n_classes < 2:
            raise ModelError(f"need d_feat >= 1 and n_classes >= 2, got {self.d_feat}, {self.n_classes}")
        if self.l2_reg < 0:
            raise ModelError(f"l2_reg must be >= 0, got {self.l2_reg}")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    @property
    def layer_sizes(self) -> list[int]:
        if self.kind == "logistic":
            return [self.d_feat, self.n_classes]
        return [self.d_feat, *self.hidden_sizes, self.n_classes]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    @property
    def strongly_convex(self) -> bool:
        return self.kind == "logistic" and self.l2_reg > 0


def _unpack(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise DimensionError(f"expected {spec.n_params} parameters, got {params.size}")
    layers = []
    off = 0
    sizes = spec.layer_sizes
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = params[off : off + a * b].reshape(a, b)
        off += a * b
        layers.append((W, params[off : off + b]))
        off += b
    return layers


def _check_batch(spec: ModelSpec, X: np.ndarray, y: np.ndarray | None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.d_feat:
        raise DimensionError(f"features must have {spec.d_feat} columns, got shape {X.shape}")
    if y is not None:
        y = np.asarray(y, dtype=np.int64)
        if y.shape[0] != X.shape[0] or X.shape[0] == 0:
            raise ModelError(f"batch needs matching non-empty features/labels, got {X.shape[0]} and {y.shape[0]}")
        if y.min() < 0 or y.max() >= spec.n_classes:
            raise ModelError(f"label out of range [0, {spec.n_classes})")
    return X, y


def _forward(layers, X):
    acts = [X]
    h = X
    for k, (W, b) in enumerate(layers):
        z = h @ W + b
        if k < len(layers) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return acts, h


def relu_margin(spec: ModelSpec, params, X) -> float:
    """Smallest ``|pre-activation|`` over hidden units; ``inf`` without hidden layers.

    Finite differences are only meaningful when this exceeds the step size.
    """
    layers = _unpack(spec, params)
    X, _ = _check_batch(spec, X, None)
    best = np.inf
    h = X
    for W, b in layers[:-1]:
        z = h @ W + b
        best = min(best, float(np.min(np.abs(z))))
        h = np.maximum(z, 0.0)
    return best


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits(spec: ModelSpec, params, X) -> np.ndarray:
    X, _ = _check_batch(spec, X, None)
    return _forward(_unpack(spec, params), X)[1]


def _reg_value(spec, layers) -> float:
    if spec.kind != "logistic" or spec.l2_reg == 0:
        return 0.0
    W, b = layers[0]
    return 0.5 * spec.l2_reg * (float(np.sum(W * W)) + float(np.dot(b, b)))


def loss(spec: ModelSpec, params, X, y) -> float:
    """Mean softmax cross-entropy, plus ``l2_reg/2 * ||params||^2`` for logistic."""
    X, y = _check_batch(spec, X, y)
    layers = _unpack(spec, params)
    z = _forward(layers, X)[1]
    ce = -np.mean(_log_softmax(z)[np.arange(y.size), y])
    return float(ce) + _reg_value(spec, layers)


def _backprop(spec: ModelSpec, params, X, y, want_value: bool):
    X, y = _check_batch(spec, X, y)
    layers = _unpack(spec, params)
    acts, z = _forward(layers, X)
    m = y.size
    rows = np.arange(m)
    zs = z - z.max(axis=1, keepdims=True)
    ez = np.exp(zs)
    norm = ez.sum(axis=1, keepdims=True)
    value = None
    if want_value:
        value = float(-np.mean(zs[rows, y] - np.log(norm[:, 0]))) + _reg_value(spec, layers)

    delta = ez / norm
    delta[rows, y] -= 1.0
    delta /= m
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        grads.append((acts[k].T @ delta, delta.sum(axis=0)))
        if k > 0:
            # ReLU derivative at 0 taken as 0
            delta = (delta @ W.T) * (acts[k] > 0)
    grads.reverse()
    flat = np.concatenate([part for gW, gb in grads for part in (gW.ravel(), gb)])
    if spec.kind == "logistic" and spec.l2_reg:
        flat += spec.l2_reg * np.asarray(params, dtype=np.float64)
    return value, flat


def loss_and_grad(spec: ModelSpec, params, X, y) -> tuple[float, np.ndarray]:
    return _backprop(spec, params, X, y, True)


def grad(spec: ModelSpec, params, X, y) -> np.ndarray:
    return _backprop(spec, params, X, y, False)[1]


def predict(spec: ModelSpec, params, X) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. lowest class on ties
    return np.argmax(logits(spec, params, X), axis=1)


def accuracy(spec: ModelSpec, params, X, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        return 0.0
    return float(np.mean(predict(spec, params, X) == y))


def fd_check(spec: ModelSpec, params, X, y, epsilon: float = 1e-5, step: float | None = None) -> float:
    """Largest relative gap between the analytic gradient and finite differences.

    Uses the fourth-order central stencil with step ``step`` (defaults to
    ``epsilon``); the relative error of each coordinate is
    ``|g - g_fd| / (|g| + epsilon)``.
    """
    if not epsilon > 0:
        raise ModelError(f"epsilon must be positive, got {epsilon}")
    h = epsilon if step is None else step
    params = np.array(params, dtype=np.float64)
    g = grad(spec, params, X, y)
    worst = 0.0
    for k in range(params.size):
        orig = params[k]
        vals = []
        for s in (2, 1, -1, -2):
            params[k] = orig + s * h
            vals.append(loss(spec, params, X, y))
        params[k] = orig
        fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
        worst = max(worst, abs(g[k] - fd) / (abs(g[k]) + epsilon))
    return worst


def init_params(spec: ModelSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Zeros for logistic; Glorot-uniform weights and zero biases for the MLP."""
    if spec.kind == "logistic":
        return np.zeros(spec.n_params)
    if rng is None:
        raise ModelError("MLP initialisation needs a random generator")
    parts = []
    sizes = spec.layer_sizes
    for a, b in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (a + b))
        parts.append(rng.uniform(-lim, lim, size=a * b))
        parts.append(np.zeros(b))
    return np.concatenate(parts)


def smoothness_bound(spec: ModelSpec, X) -> float:
    """Upper bound on the Hessian norm of the logistic objective over ``X``.

    Per sample the softmax cross-entropy Hessian is bounded by
    ``0.5 * (||x||^2 + 1)`` (the bias acts as a unit feature).
    """
    if spec.kind != "logistic":
        raise ModelError("analytic smoothness bound only exists for the logistic model")
    X = np.asarray(X, dtype=np.float64)
    max_sq = float(np.max(np.sum(X * X, axis=1))) + 1.0
    return spec.l2_reg + 0.5 * max_sq


class ShardObjective:
    """Full-batch local objective ``f_i`` of one shard's training rows."""

    def __init__(self, spec: ModelSpec, X, y):
        self.spec = spec
        self.X, self.y = _check_batch(spec, X, y)

    @property
    def dim(self) -> int:
        return self.spec.n_params

    @property
    def strong_convexity(self) -> float:
        return self.spec.l2_reg if self.spec.strongly_convex else 0.0

    @property
    def smoothness(self) -> float:
        return smoothness_bound(self.spec, self.X)

    def loss(self, params) -> float:
        return loss(self.spec, params, self.X, self.y)

    def grad(self, params) -> np.ndarray:
        return grad(self.spec, params, self.X, self.y)


class MeanObjective:
    """``F = (1/n) * sum_i f_i`` with a fixed, ascending summation order."""

    def __init__(self, parts):
        self.parts = list(parts)
        if not self.parts:
            raise ModelError("mean objective needs at least one part")

    @property
    def dim(self) -> int:
        return self.parts[0].dim

    @property
    def strong_convexity(self) -> float:
        return min(p.strong_convexity for p in self.parts)

    @property
    def smoothness(self) -> float:
        return max(p.smoothness for p in self.parts)

    def loss(self, params) -> float:
        total = 0.0
        for p in self.parts:
            total += p.loss(params)
        return total / len(self.parts)

    def grad(self, params) -> np.ndarray:
        acc = self.parts[0].grad(params).copy()
        for p in self.parts[1:]:
            acc += p.grad(params)
        return acc / len(self.parts)


def minimize_full_batch(obj, x0, tol: float = 1e-10, max_iter: int = 200_000):
    """Minimise a smooth strongly convex objective to ``||grad|| <= tol``.

    Nesterov's constant-momentum scheme with step ``1/L`` and gradient-based
    momentum restart. Returns ``(x, grad_norm, iterations)``.
    """
    L = float(obj.smoothness)
    mu = float(obj.strong_convexity)
    if mu <= 0:
        raise ModelError("objective is not strongly convex")
    q = np.sqrt(mu / L)
    beta = (1 - q) / (1 + q)
    x = np.array(x0, dtype=np.float64)
    y = x.copy()
    for it in range(max_iter):
        g = obj.grad(y)
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return y, gn, it
        x_new = y - g / L
        if np.dot(g, x_new - x) > 0:
            y = x_new
        else:
            y = x_new + beta * (x_new - x)
        x = x_new
    g = obj.grad(y)
    return y, float(np.linalg.norm(g)), max_iter
