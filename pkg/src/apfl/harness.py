"""Orchestration: config -> dataset -> run -> artifacts on disk."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import __version__, diagnostics, io, models
from .config import ExperimentConfig, load_config, parse_config
from .datagen import (
    FederatedDataset,
    gen_synthetic,
    load_csv_dataset,
    partition_by_label,
    partition_iid,
    split_dataset,
)
from .federation import RunResult, model_spec, run_experiment

log = logging.getLogger(__name__)


def build_dataset(cfg: ExperimentConfig) -> FederatedDataset:
    if cfg.dataset_kind == "synthetic":
        ds = gen_synthetic(cfg.gamma, cfg.beta, cfg.n, cfg.per_client, cfg.d_feat, cfg.n_classes, cfg.seed)
    else:
        X, y = load_csv_dataset(cfg.csv_path)
        if cfg.partition == "iid":
            ds = partition_iid(X, y, cfg.n, cfg.seed)
        else:
            ds = partition_by_label(X, y, cfg.classes_per_client, cfg.n, cfg.seed)
        ds.provenance["csv_path"] = cfg.csv_path
    return split_dataset(ds, cfg.val_fraction, cfg.seed)


def provenance(cfg: ExperimentConfig, dataset: FederatedDataset, result: RunResult | None = None) -> dict:
    prov = cfg.to_flat()
    if result is not None:
        prov.update(result.resolved)
    prov["library_version"] = __version__
    for k, v in dataset.provenance.items():
        prov[f"dataset.provenance.{k}"] = v
    return dict(sorted(prov.items()))


def run_to_dir(cfg: ExperimentConfig, out_dir) -> RunResult:
    """Execute a run and write ``metrics.csv``, ``provenance.json``, ``models.bin``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(cfg)
    result = run_experiment(cfg, ds, keep_round_models=cfg.diagnostics)
    io.write_metrics(result.rows, out / "metrics.csv")
    io.write_provenance(provenance(cfg, ds, result), out / "provenance.json")
    io.write_checkpoint(io.run_checkpoint_vectors(result), out / "models.bin")
    if cfg.diagnostics:
        rep = diagnose_run(cfg, ds, result.round_models + [result.w_hat])
        (out / "diagnostics.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    return result


def load_run(run_dir):
    run_dir = Path(run_dir)
    prov_path = run_dir / "provenance.json"
    if not prov_path.is_file():
        raise FileNotFoundError(f"no provenance.json in {run_dir}")
    cfg = parse_config(prov_path.read_text())
    ckpt = io.unpack_run_checkpoint(io.read_checkpoint(run_dir / "models.bin"))
    return cfg, ckpt


def diagnose_run(
    cfg: ExperimentConfig,
    ds: FederatedDataset,
    trajectory,
    n_random: int = 8,
    gd_tolerance: float = 1e-8,
    C: float = 1.0,
    delta_conf: float = 0.05,
) -> dict:
    """Diversity report plus per-client generalization-bound inputs and optimal alpha.

    Loss-side inputs use the 0-1 error (so ``B = 1``); ``G`` is 1 and the VC
    proxy is the model's parameter count.
    """
    spec = model_spec(cfg, ds)
    objs = [models.ShardObjective(spec, s.X_train, s.y_train) for s in ds.shards]
    scale = float(np.sqrt(np.mean([np.dot(w, w) for w in trajectory]) / spec.n_params)) if len(trajectory) else 1.0
    rep = diagnostics.diversity_report(
        objs,
        trajectory=list(trajectory),
        n_random=n_random,
        random_scale=max(scale, 1e-3),
        gd_tolerance=gd_tolerance,
        shards_X=[s.X_train for s in ds.shards],
        shard_labels=[s.y_train for s in ds.shards],
        n_classes=ds.n_classes,
        seed=cfg.seed,
    )
    out = rep.to_dict()

    w_glob = trajectory[-1] if len(trajectory) else np.zeros(spec.n_params)
    X_all = np.concatenate([s.X_train for s in ds.shards])
    y_all = np.concatenate([s.y_train for s in ds.shards])
    glob_err = 1.0 - models.accuracy(spec, w_glob, X_all, y_all)
    m_total = int(y_all.size)
    gen = []
    for i, s in enumerate(ds.shards):
        local_err = 0.0
        if spec.strongly_convex:
            v_i, _, _ = models.minimize_full_batch(objs[i], np.zeros(spec.n_params), tol=gd_tolerance)
            local_err = 1.0 - models.accuracy(spec, v_i, s.X_train, s.y_train)
        inp = diagnostics.GeneralizationInputs(
            alpha=0.5,
            global_emp_risk=glob_err,
            l1_div=rep.l1_div_proxy_i[i],
            local_opt_risk=local_err,
            d_vc=float(spec.n_params),
            delta_conf=delta_conf,
            m_total=m_total,
            m_local=int(s.train_idx.size),
            C=C,
            B=1.0,
            G=1.0,
            lambda_S=rep.lambda_i[i],
        )
        gen.append({**inp.__dict__, "optimal_alpha": diagnostics.optimal_alpha(inp)})
    out["generalization"] = gen
    out["generalization_note"] = (
        "C, B, G and the VC proxy are user-level constants; l1_div is the label-histogram proxy"
    )
    return out


def diagnose_dir(run_dir, n_random: int = 8, gd_tolerance: float = 1e-8, C: float = 1.0) -> dict:
    cfg, ckpt = load_run(run_dir)
    ds = build_dataset(cfg)
    probes = [ckpt["w_final"], ckpt["w_hat"], *ckpt["v_hat"]]
    return diagnose_run(cfg, ds, probes, n_random=n_random, gd_tolerance=gd_tolerance, C=C)


__all__ = [
    "build_dataset",
    "diagnose_dir",
    "diagnose_run",
    "load_config",
    "load_run",
    "provenance",
    "run_to_dir",
]
