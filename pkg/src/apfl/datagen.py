"""Federated dataset construction: synthetic(gamma, beta), partitioners, CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .numkit import RngStream, gaussian_vector


class DatasetError(ValueError):
    pass


@dataclass
class Shard:
    client_id: int
    features: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.val_idx = np.asarray(self.val_idx, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"shard {self.client_id}: {self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels"
            )
        if np.intersect1d(self.train_idx, self.val_idx).size:
            raise DatasetError(f"shard {self.client_id}: train and validation indices overlap")

    @property
    def n_rows(self) -> int:
        return int(self.labels.shape[0])

    @property
    def X_train(self) -> np.ndarray:
        return self.features[self.train_idx]

    @property
    def y_train(self) -> np.ndarray:
        return self.labels[self.train_idx]

    @property
    def X_val(self) -> np.ndarray:
        return self.features[self.val_idx]

    @property
    def y_val(self) -> np.ndarray:
        return self.labels[self.val_idx]


@dataclass
class FederatedDataset:
    shards: list[Shard]
    d_feat: int
    n_classes: int
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.client_id for s in self.shards]
        if ids != list(range(len(self.shards))):
            raise DatasetError(f"shard client ids must be 0..n-1 in order, got {ids}")
        for s in self.shards:
            if s.features.shape[1] != self.d_feat:
                raise DatasetError(f"shard {s.client_id} has {s.features.shape[1]} features, expected {self.d_feat}")
            if s.labels.size and (s.labels.min() < 0 or s.labels.max() >= self.n_classes):
                raise DatasetError(f"shard {s.client_id} has labels outside [0, {self.n_classes})")

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    def subset(self, client_ids) -> "FederatedDataset":
        """Re-index a subset of shards as clients 0..k-1."""
        shards = []
        for new_id, cid in enumerate(client_ids):
            s = self.shards[cid]
            shards.append(Shard(new_id, s.features, s.labels, s.train_idx, s.val_idx))
        prov = dict(self.provenance, subset=[int(c) for c in client_ids])
        return FederatedDataset(shards, self.d_feat, self.n_classes, prov)


def gen_synthetic(
    gamma: float,
    beta: float,
    n_clients: int,
    samples_per_client: int = 200,
    d_feat: int = 20,
    n_classes: int = 10,
    seed: int = 0,
) -> FederatedDataset:
    """Heterogeneous synthetic federation controlled by ``(gamma, beta)``.

    ``gamma`` is the variance of each client's model mean (model drift across
    clients); ``beta`` is the variance of each client's input hyper-mean
    (covariate drift). Zero variances are exact, not approximate.
    Shards are returned with every row in ``train_idx``; use
    :func:`split_train_val` to carve out validation rows.
    """
    if gamma < 0 or beta < 0:
        raise DatasetError(f"variances must be non-negative, got gamma={gamma}, beta={beta}")
    if n_clients <= 0 or samples_per_client <= 0:
        raise DatasetError(f"counts must be positive, got n_clients={n_clients}, samples_per_client={samples_per_client}")
    if d_feat < 1 or n_classes < 2:
        raise DatasetError(f"need d_feat >= 1 and n_classes >= 2, got {d_feat}, {n_classes}")

    cov_sd = np.arange(1, d_feat + 1, dtype=np.float64) ** (-0.6)
    shards = []
    for i in range(n_clients):
        p = synthetic_client_params(gamma, beta, d_feat, n_classes, seed, i)
        X = p["nu"] + p["rng"].standard_normal((samples_per_client, d_feat)) * cov_sd
        # argmax of softmax == argmax of logits
        y = np.argmax(X @ p["W"] + p["b"], axis=1)
        shards.append(Shard(i, X, y, np.arange(samples_per_client)))
    prov = {
        "generator": "synthetic",
        "gamma": float(gamma),
        "beta": float(beta),
        "n_clients": int(n_clients),
        "samples_per_client": int(samples_per_client),
        "d_feat": int(d_feat),
        "n_classes": int(n_classes),
        "seed": int(seed),
    }
    return FederatedDataset(shards, d_feat, n_classes, prov)


def synthetic_client_params(gamma: float, beta: float, d_feat: int, n_classes: int, seed: int, client_id: int) -> dict:
    """Per-client draws of the synthetic generator, in generation order.

    Returns ``mu, W, b, V, nu`` and the client's generator positioned where
    sample drawing starts.
    """
    rng = RngStream(seed).child(0xDA7A, client_id).generator()
    mu = gaussian_vector(rng, 1, 0.0, np.sqrt(gamma))[0]
    W = gaussian_vector(rng, d_feat * n_classes, mu, 1.0).reshape(d_feat, n_classes)
    b = gaussian_vector(rng, n_classes, mu, 1.0)
    V = gaussian_vector(rng, 1, 0.0, np.sqrt(beta))[0]
    nu = gaussian_vector(rng, d_feat, V, 1.0)
    return {"mu": mu, "W": W, "b": b, "V": V, "nu": nu, "rng": rng}


def _check_rows(features, labels):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise DatasetError("empty dataset")
    if features.shape[0] != labels.shape[0]:
        raise DatasetError(f"{features.shape[0]} feature rows vs {labels.shape[0]} labels")
    if labels.min() < 0:
        raise DatasetError("labels must be non-negative")
    return features, labels


def partition_by_label(
    features, labels, classes_per_client: int, n_clients: int, seed: int = 0, n_classes: int | None = None
) -> FederatedDataset:
    """Label-skewed split: each client sees at most ``classes_per_client`` labels.

    The ``n_clients * classes_per_client`` chunks are spread over the classes
    as evenly as possible (larger classes first), and each class's rows,
    shuffled by ``seed``, are cut into near-equal pure-label chunks. Clients
    then take chunks round by round, lowest client id first, preferring the
    label with the most chunks left that they do not already hold.
    """
    features, labels = _check_rows(features, labels)
    c = int(n_classes if n_classes is not None else labels.max() + 1)
    present = np.unique(labels)
    if classes_per_client < 1 or classes_per_client > c:
        raise DatasetError(f"classes_per_client={classes_per_client} out of range for n_classes={c}")
    if present.size < c:
        missing = sorted(set(range(c)) - set(present.tolist()))
        raise DatasetError(f"empty class(es): {missing}")
    if n_clients < 1:
        raise DatasetError(f"n_clients must be positive, got {n_clients}")
    n_chunks = n_clients * classes_per_client
    if n_chunks < c:
        raise DatasetError(
            f"n_clients*classes_per_client={n_chunks} chunks cannot cover {c} classes"
        )

    counts = np.bincount(labels, minlength=c)
    per_class = np.ones(c, dtype=np.int64)
    for _ in range(n_chunks - c):
        # next chunk goes to the class with the largest rows-per-chunk
        per_class[int(np.argmax(counts / per_class))] += 1
    if np.any(per_class > counts):
        raise DatasetError("a class has fewer rows than the chunks it must supply")

    rng = RngStream(seed).child(0x5EED).generator()
    pools: dict[int, list[np.ndarray]] = {}
    for lab in range(c):
        rows = np.flatnonzero(labels == lab)
        rows = rows[rng.permutation(rows.size)]
        pools[lab] = list(np.array_split(rows, per_class[lab]))

    assigned: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    held: list[set[int]] = [set() for _ in range(n_clients)]
    for _ in range(classes_per_client):
        for cid in range(n_clients):
            avail = [lab for lab in range(c) if pools[lab]]
            fresh = [lab for lab in avail if lab not in held[cid]] or avail
            pick = max(fresh, key=lambda lab: (len(pools[lab]), -lab))
            assigned[cid].append(pools[pick].pop(0))
            held[cid].add(pick)

    shards = []
    for cid in range(n_clients):
        rows = np.sort(np.concatenate(assigned[cid]))
        shards.append(Shard(cid, features[rows], labels[rows], np.arange(rows.size)))
    prov = {
        "generator": "partition_by_label",
        "classes_per_client": int(classes_per_client),
        "n_clients": int(n_clients),
        "seed": int(seed),
    }
    return FederatedDataset(shards, features.shape[1], c, prov)


def partition_iid(features, labels, n_clients: int, seed: int = 0, n_classes: int | None = None) -> FederatedDataset:
    """Shuffle rows by ``seed`` and deal them round-robin to clients."""
    features, labels = _check_rows(features, labels)
    if n_clients < 1 or n_clients > labels.shape[0]:
        raise DatasetError(f"n_clients={n_clients} invalid for {labels.shape[0]} rows")
    c = int(n_classes if n_classes is not None else labels.max() + 1)
    rng = RngStream(seed).child(0x11D).generator()
    perm = rng.permutation(labels.shape[0])
    shards = []
    for cid in range(n_clients):
        rows = perm[cid::n_clients]
        shards.append(Shard(cid, features[rows], labels[rows], np.arange(rows.size)))
    prov = {"generator": "partition_iid", "n_clients": int(n_clients), "seed": int(seed)}
    return FederatedDataset(shards, features.shape[1], c, prov)


def split_train_val(shard: Shard, val_fraction: float, seed: int = 0) -> Shard:
    if not 0 < val_fraction < 1:
        raise DatasetError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = shard.n_rows
    if n < 2:
        raise DatasetError(f"shard {shard.client_id} has {n} rows; need at least 2")
    n_val = int(np.floor(n * val_fraction + 0.5))
    n_val = min(max(n_val, 1), n - 1)
    rng = RngStream(seed).child(0x5B11, shard.client_id).generator()
    perm = rng.permutation(n)
    return Shard(shard.client_id, shard.features, shard.labels, np.sort(perm[n_val:]), np.sort(perm[:n_val]))


def split_dataset(ds: FederatedDataset, val_fraction: float, seed: int = 0) -> FederatedDataset:
    shards = [split_train_val(s, val_fraction, seed) for s in ds.shards]
    prov = dict(ds.provenance, val_fraction=float(val_fraction), split_seed=int(seed))
    return FederatedDataset(shards, ds.d_feat, ds.n_classes, prov)


def load_csv_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``label,feat_0,...,feat_{d-1}`` rows."""
    path = Path(path)
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with path.open(newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            if width is None:
                width = len(rec)
            elif len(rec) != width:
                raise DatasetError(f"{path}: line {lineno}: expected {width} fields, got {len(rec)}")
            try:
                lab = float(rec[0])
                feats = [float(f) for f in rec[1:]]
            except ValueError:
                raise DatasetError(f"{path}: line {lineno}: non-numeric field") from None
            if lab < 0 or lab != int(lab):
                raise DatasetError(f"{path}: line {lineno}: label {rec[0]!r} is not a non-negative integer")
            labels.append(int(lab))
            rows.append(feats)
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    if width < 2:
        raise DatasetError(f"{path}: rows need a label and at least one feature")
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


def write_csv_dataset(path, features, labels) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        for lab, row in zip(labels, features):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def label_histogram(labels, n_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    return counts / counts.sum()
