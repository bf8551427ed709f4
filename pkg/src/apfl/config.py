"""Experiment configuration: parsing, validation, default resolution.

Configs are TOML documents whose (dotted) keys map one-to-one onto the flat
key table below. Every key has a resolved value after parsing, and
``ExperimentConfig.to_flat`` gives back the full table for provenance.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "apfl"
    n: int = 10
    K: int = 10
    tau: int = 10
    T: int = 100
    batch_size: int = 20
    seed: int = 0
    val_fraction: float = 0.2
    eval_every: int = 1
    diagnostics: bool = False
    chain_rule: bool = True
    alpha_update_cadence: str = "per_round"
    workers: int = 1
    record_wallclock: bool = False
    alpha_mode: str = "adaptive"
    alpha_value: float = 0.01
    model_kind: str = "logistic"
    l2_reg: float = 1e-2
    hidden_sizes: tuple[int, ...] = (200, 200)
    dataset_kind: str = "synthetic"
    gamma: float = 0.0
    beta: float = 0.0
    per_client: int = 200
    d_feat: int = 20
    n_classes: int = 10
    csv_path: str = ""
    partition: str = "iid"
    classes_per_client: int = 2
    lr_kind: str = "constant"
    eta0: float = 0.1
    decay: float = 0.01
    eta: float = 0.05
    mu: float | None = None
    kappa: float | None = None
    lr_scale: float = 16.0
    kappa_mult: float = 128.0

    @property
    def rounds(self) -> int:
        return self.T // self.tau

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for key, (name, _) in KEYS.items():
            if key.startswith("alpha."):
                continue
            val = getattr(self, name)
            if isinstance(val, tuple):
                val = list(val)
            out[key] = val
        out["alpha." + self.alpha_mode] = self.alpha_value
        return dict(sorted(out.items()))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        cfg = replace(self, **kw)
        validate(cfg)
        return cfg


def _bool(v):
    if isinstance(v, bool):
        return v
    raise TypeError("expected a boolean")


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        if isinstance(v, float) and v.is_integer():
            return int(v)
        raise TypeError("expected an integer")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _opt_float(v):
    return None if v is None else _float(v)


def _str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _int_tuple(v):
    if not isinstance(v, (list, tuple)):
        raise TypeError("expected a list of integers")
    return tuple(_int(x) for x in v)


# dotted config key -> (field name, coercion)
KEYS: dict[str, tuple[str, Any]] = {
    "mode": ("mode", _str),
    "n": ("n", _int),
    "K": ("K", _int),
    "tau": ("tau", _int),
    "T": ("T", _int),
    "batch_size": ("batch_size", _int),
    "seed": ("seed", _int),
    "val_fraction": ("val_fraction", _float),
    "eval_every": ("eval_every", _int),
    "diagnostics": ("diagnostics", _bool),
    "chain_rule": ("chain_rule", _bool),
    "alpha_update_cadence": ("alpha_update_cadence", _str),
    "workers": ("workers", _int),
    "record_wallclock": ("record_wallclock", _bool),
    "alpha.fixed": ("alpha_value", _float),
    "alpha.adaptive": ("alpha_value", _float),
    "model.kind": ("model_kind", _str),
    "model.l2_reg": ("l2_reg", _float),
    "model.hidden_sizes": ("hidden_sizes", _int_tuple),
    "dataset.kind": ("dataset_kind", _str),
    "dataset.synthetic.gamma": ("gamma", _float),
    "dataset.synthetic.beta": ("beta", _float),
    "dataset.synthetic.per_client": ("per_client", _int),
    "dataset.synthetic.d_feat": ("d_feat", _int),
    "dataset.synthetic.n_classes": ("n_classes", _int),
    "dataset.csv.path": ("csv_path", _str),
    "dataset.csv.partition": ("partition", _str),
    "dataset.csv.classes_per_client": ("classes_per_client", _int),
    "lr.kind": ("lr_kind", _str),
    "lr.eta0": ("eta0", _float),
    "lr.decay": ("decay", _float),
    "lr.eta": ("eta", _float),
    "lr.mu": ("mu", _opt_float),
    "lr.kappa": ("kappa", _opt_float),
    "lr.scale": ("lr_scale", _float),
    "lr.kappa_mult": ("kappa_mult", _float),
}

# keys that are provenance-only and ignored when reading a config back
_PROVENANCE_ONLY = ("library_version", "dataset.provenance", "lr.a")


def _flatten(doc: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def from_flat(flat: dict[str, Any]) -> ExperimentConfig:
    kw: dict[str, Any] = {}
    alpha_keys = [k for k in flat if k.startswith("alpha.")]
    for key, val in flat.items():
        if key in _PROVENANCE_ONLY or any(key.startswith(p + ".") for p in _PROVENANCE_ONLY):
            continue
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        name, coerce = KEYS[key]
        try:
            kw[name] = coerce(val)
        except TypeError as exc:
            raise ConfigError(f"{key}: {exc}, got {val!r}") from None
    if len(alpha_keys) > 1:
        raise ConfigError(f"alpha: give exactly one of alpha.fixed / alpha.adaptive, got {sorted(alpha_keys)}")

    mode = kw.get("mode", "apfl")
    if alpha_keys:
        kw["alpha_mode"] = alpha_keys[0].split(".", 1)[1]
    elif mode == "fedavg":
        kw.update(alpha_mode="fixed", alpha_value=0.0)
    elif mode == "local_only":
        kw.update(alpha_mode="fixed", alpha_value=1.0)
    if "dataset.kind" not in flat:
        if any(k.startswith("dataset.csv.") for k in flat):
            kw["dataset_kind"] = "csv"
    if "lr.kind" not in flat and "lr.eta0" in flat:
        kw["lr_kind"] = "geometric"
    cfg = ExperimentConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.mode in ("apfl", "fedavg", "local_only"), f"mode must be apfl|fedavg|local_only, got {cfg.mode!r}")
    need(cfg.n >= 1, f"n={cfg.n} must be >= 1")
    need(1 <= cfg.K, f"K={cfg.K} must be >= 1")
    need(cfg.K <= cfg.n, f"K={cfg.K} > n={cfg.n}")
    need(cfg.tau >= 1, f"tau={cfg.tau} must be >= 1")
    need(cfg.T >= cfg.tau, f"T={cfg.T} < tau={cfg.tau}")
    need(cfg.batch_size >= 1, f"batch_size={cfg.batch_size} must be >= 1")
    need(0 < cfg.val_fraction < 1, f"val_fraction={cfg.val_fraction} must be in (0, 1)")
    need(cfg.eval_every >= 1, f"eval_every={cfg.eval_every} must be >= 1")
    need(cfg.workers >= 1, f"workers={cfg.workers} must be >= 1")
    need(cfg.alpha_mode in ("fixed", "adaptive"), f"alpha mode must be fixed|adaptive, got {cfg.alpha_mode!r}")
    need(0.0 <= cfg.alpha_value <= 1.0, f"alpha.{cfg.alpha_mode}={cfg.alpha_value} outside [0, 1]")
    need(
        cfg.alpha_update_cadence in ("per_step", "per_round"),
        f"alpha_update_cadence must be per_step|per_round, got {cfg.alpha_update_cadence!r}",
    )
    if cfg.mode == "fedavg":
        need(
            cfg.alpha_mode == "fixed" and cfg.alpha_value == 0.0,
            f"mode=fedavg requires alpha.fixed=0, got alpha.{cfg.alpha_mode}={cfg.alpha_value}",
        )
    if cfg.mode == "local_only":
        need(
            cfg.alpha_mode == "fixed" and cfg.alpha_value == 1.0,
            f"mode=local_only requires alpha.fixed=1, got alpha.{cfg.alpha_mode}={cfg.alpha_value}",
        )
    need(cfg.model_kind in ("logistic", "mlp"), f"model.kind must be logistic|mlp, got {cfg.model_kind!r}")
    need(cfg.l2_reg >= 0, f"model.l2_reg={cfg.l2_reg} must be >= 0")
    need(all(h >= 1 for h in cfg.hidden_sizes), f"model.hidden_sizes={list(cfg.hidden_sizes)} must be positive")
    need(cfg.dataset_kind in ("synthetic", "csv"), f"dataset.kind must be synthetic|csv, got {cfg.dataset_kind!r}")
    if cfg.dataset_kind == "synthetic":
        need(cfg.gamma >= 0 and cfg.beta >= 0, f"gamma={cfg.gamma}, beta={cfg.beta} must be >= 0")
        need(cfg.per_client >= 2, f"dataset.synthetic.per_client={cfg.per_client} must be >= 2")
        need(cfg.d_feat >= 1, f"dataset.synthetic.d_feat={cfg.d_feat} must be >= 1")
        need(cfg.n_classes >= 2, f"dataset.synthetic.n_classes={cfg.n_classes} must be >= 2")
    else:
        need(bool(cfg.csv_path), "dataset.csv.path is required for csv datasets")
        need(cfg.partition in ("iid", "by_label"), f"dataset.csv.partition must be iid|by_label, got {cfg.partition!r}")
        need(cfg.classes_per_client >= 1, f"dataset.csv.classes_per_client={cfg.classes_per_client} must be >= 1")
    need(cfg.lr_kind in ("theory", "geometric", "constant"), f"lr.kind must be theory|geometric|constant, got {cfg.lr_kind!r}")
    need(cfg.eta0 > 0, f"lr.eta0={cfg.eta0} must be > 0")
    need(0 <= cfg.decay < 1, f"lr.decay={cfg.decay} must be in [0, 1)")
    need(cfg.eta > 0, f"lr.eta={cfg.eta} must be > 0")
    need(cfg.mu is None or cfg.mu > 0, f"lr.mu={cfg.mu} must be > 0")
    need(cfg.kappa is None or cfg.kappa >= 1, f"lr.kappa={cfg.kappa} must be >= 1")
    if cfg.lr_kind == "theory":
        need(
            cfg.model_kind == "logistic" or (cfg.mu is not None and cfg.kappa is not None),
            "lr.kind=theory with an MLP needs explicit lr.mu and lr.kappa",
        )
        need(cfg.mu is not None or cfg.l2_reg > 0, "lr.kind=theory needs lr.mu or model.l2_reg > 0")


def parse_config(text: str) -> ExperimentConfig:
    """Parse a TOML config document (or a flat JSON provenance object)."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON config: {exc}") from None
    else:
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    return from_flat(_flatten(doc))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())


def field_names() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]
