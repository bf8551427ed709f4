"""Command line entry point: ``apfl {run,diagnose,personalize,gen-data}``.

Failures exit non-zero with a single ``error: <kind>: <detail>`` line on
stderr. Exit 2 means bad input (usage, config, missing file); exit 1 means
the run itself failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datagen, harness, io, models
from .config import ConfigError, load_config
from .datagen import DatasetError
from .federation import NumericalError, personalize_new_client
from .numkit import RngStream


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.workers is not None:
        cfg = cfg.with_overrides(workers=args.workers)
    harness.run_to_dir(cfg, args.out)
    print(json.dumps({"status": "ok", "out": str(args.out)}))
    return 0


def _cmd_diagnose(args) -> int:
    rep = harness.diagnose_dir(args.run, n_random=args.n_random, gd_tolerance=args.gd_tol, C=args.C)
    text = json.dumps(rep, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_personalize(args) -> int:
    cfg, ckpt = harness.load_run(args.run)
    X, y = datagen.load_csv_dataset(args.shard)
    n_classes = cfg.n_classes if cfg.dataset_kind == "synthetic" else None
    shard = datagen.Shard(0, X, y, np.arange(y.size))
    shard = datagen.split_train_val(shard, args.val_fraction, args.seed)
    spec = _spec_for(cfg, X.shape[1], n_classes, ckpt["w_final"].size)
    w_glob = ckpt["w_hat"] if args.use_average else ckpt["w_final"]
    rng = RngStream(args.seed).child(0xA11CE).generator()
    mixed = personalize_new_client(
        spec, w_glob, shard, args.alpha, args.epochs, args.lr, cfg.batch_size, rng, cfg.chain_rule
    )
    io.write_checkpoint([mixed], args.out)
    report = {
        "status": "ok",
        "out": str(args.out),
        "global_val_acc": models.accuracy(spec, w_glob, shard.X_val, shard.y_val),
        "personalized_val_acc": models.accuracy(spec, mixed, shard.X_val, shard.y_val),
        "alpha": args.alpha,
        "epochs": args.epochs,
    }
    print(json.dumps(report))
    return 0


def _spec_for(cfg, d_feat, n_classes, n_params) -> models.ModelSpec:
    # the checkpoint length pins n_classes when the config cannot
    if n_classes is None:
        for c in range(2, n_params + 1):
            spec = models.ModelSpec(cfg.model_kind, d_feat, c, cfg.l2_reg, cfg.hidden_sizes)
            if spec.n_params == n_params:
                return spec
        raise DatasetError(f"no class count matches a {n_params}-parameter model with {d_feat} features")
    spec = models.ModelSpec(cfg.model_kind, d_feat, n_classes, cfg.l2_reg, cfg.hidden_sizes)
    if spec.n_params != n_params:
        raise DatasetError(f"shard has {d_feat} features; incompatible with the saved {n_params}-parameter model")
    return spec


def _cmd_gen_data(args) -> int:
    ds = datagen.gen_synthetic(
        args.gamma, args.beta, args.n_clients, args.per_client, args.d_feat, args.n_classes, args.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in ds.shards:
        datagen.write_csv_dataset(out / f"client_{s.client_id:04d}.csv", s.features, s.labels)
    X = np.concatenate([s.features for s in ds.shards])
    y = np.concatenate([s.labels for s in ds.shards])
    datagen.write_csv_dataset(out / "pooled.csv", X, y)
    io.write_provenance(ds.provenance, out / "provenance.json")
    print(json.dumps({"status": "ok", "out": str(out), "clients": ds.n_clients}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="apfl", description="Federated learning simulator with adaptive per-client model mixing")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--workers", type=int, default=None, help="override the config's worker count")
    r.set_defaults(func=_cmd_run)

    d = sub.add_parser("diagnose", help="heterogeneity report for a saved run")
    d.add_argument("--run", required=True, help="run output directory")
    d.add_argument("--out", default=None)
    d.add_argument("--n-random", type=int, default=8)
    d.add_argument("--gd-tol", type=float, default=1e-8)
    d.add_argument("--C", type=float, default=1.0)
    d.set_defaults(func=_cmd_diagnose)

    pz = sub.add_parser("personalize", help="adapt a saved global model to a new client's CSV shard")
    pz.add_argument("--run", required=True)
    pz.add_argument("--shard", required=True)
    pz.add_argument("--out", required=True)
    pz.add_argument("--alpha", type=float, default=0.5)
    pz.add_argument("--epochs", type=int, default=5)
    pz.add_argument("--lr", type=float, default=0.05)
    pz.add_argument("--val-fraction", type=float, default=0.2)
    pz.add_argument("--seed", type=int, default=0)
    pz.add_argument("--use-average", action="store_true", help="start from the averaged global model")
    pz.set_defaults(func=_cmd_personalize)

    g = sub.add_parser("gen-data", help="write a synthetic(gamma, beta) federation as CSV")
    g.add_argument("--gamma", type=float, default=0.0)
    g.add_argument("--beta", type=float, default=0.0)
    g.add_argument("--n-clients", type=int, default=10)
    g.add_argument("--per-client", type=int, default=200)
    g.add_argument("--d-feat", type=int, default=20)
    g.add_argument("--n-classes", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing_file: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except DatasetError as exc:
        print(f"error: dataset: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
