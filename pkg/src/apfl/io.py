"""Run artifacts: metrics CSV, provenance JSON, binary model checkpoints."""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import astuple, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .federation import MetricsRow

METRICS_HEADER = (
    "round,iteration,pers_train_loss,pers_val_acc,locglob_train_loss,"
    "locglob_val_acc,global_val_acc,mean_alpha,wallclock_ms"
)
CKPT_MAGIC = b"APFLCKPT"
CKPT_VERSION = 1


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    out = io.StringIO()
    out.write(METRICS_HEADER + "\n")
    for r in rows:
        out.write(",".join(_fmt(v) for v in astuple(r)) + "\n")
    return out.getvalue()


def write_metrics(rows: Sequence[MetricsRow], path) -> None:
    # newline="" so the bytes are identical on every platform
    with Path(path).open("w", newline="") as fh:
        fh.write(metrics_csv(rows))


def read_metrics(path) -> list[MetricsRow]:
    names = [f.name for f in fields(MetricsRow)]
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if ",".join(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for rec in reader:
            vals = [int(rec[0]), int(rec[1])] + [float(x) for x in rec[2:]]
            rows.append(MetricsRow(**dict(zip(names, vals))))
    return rows


def write_provenance(prov: dict, path) -> None:
    Path(path).write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")


def read_provenance(path) -> dict:
    return json.loads(Path(path).read_text())


def write_checkpoint(vectors: Sequence[np.ndarray], path) -> None:
    """Header: 8-byte magic, u32 version, u32 vector count (all little-endian).

    Each vector follows as a u64 length and that many f64 values.
    """
    with Path(path).open("wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(vectors)))
        for v in vectors:
            v = np.ascontiguousarray(v, dtype="<f8")
            fh.write(struct.pack("<Q", v.size))
            fh.write(v.tobytes())


def read_checkpoint(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = []
    for _ in range(count):
        if off + 8 > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        (length,) = struct.unpack_from("<Q", data, off)
        off += 8
        end = off + 8 * length
        if end > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        out.append(np.frombuffer(data[off:end], dtype="<f8").astype(np.float64))
        off = end
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out


def run_checkpoint_vectors(result) -> list[np.ndarray]:
    """Fixed layout: final global, averaged global, alphas, then per client ``v``
    followed by averaged personalized model."""
    vecs = [result.w_final, result.w_hat, np.asarray(result.alphas, dtype=np.float64)]
    for v, vh in zip(result.v_final, result.v_hat):
        vecs += [v, vh]
    return vecs


def unpack_run_checkpoint(vecs: list[np.ndarray]) -> dict:
    if len(vecs) < 3 or (len(vecs) - 3) % 2:
        raise ValueError("checkpoint does not have the run layout")
    return {
        "w_final": vecs[0],
        "w_hat": vecs[1],
        "alphas": vecs[2],
        "v_final": vecs[3::2],
        "v_hat": vecs[4::2],
    }
