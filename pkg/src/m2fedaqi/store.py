"""Checkpoint files and training-history tables.

Checkpoint layout: ``b"M2CK"``, u8 format version, u32 header length, a UTF-8
JSON header holding the model config, then the parameter set in its wire form.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

from .errors import CodecError, DataError
from .metrics import KEYS as METRIC_KEYS
from .model import ModelConfig
from .nn import ParameterSet, params_from_bytes, params_to_bytes

CKPT_MAGIC = b"M2CK"
CKPT_VERSION = 1

HISTORY_COLUMNS = (
    ["round", "weights_hash", "loss"]
    + [f"val_{k}" for k in METRIC_KEYS]
    + [f"test_{k}" for k in METRIC_KEYS]
    + ["bytes_up", "bytes_down", "round_seconds"]
)


def save_checkpoint(path, params: ParameterSet, cfg: ModelConfig, extra: dict | None = None) -> Path:
    header = json.dumps({"model": cfg.to_dict(), **(extra or {})}, sort_keys=True).encode("utf-8")
    blob = CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(header)) + header + params_to_bytes(params)
    path = Path(path)
    path.write_bytes(blob)
    return path


def load_checkpoint(path):
    """Return ``(params, model_config, header_dict)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CodecError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    version, hlen = struct.unpack_from("<BI", buf, 4)
    if version != CKPT_VERSION:
        raise CodecError(f"{path}: unsupported checkpoint version {version}")
    start = 9
    header = json.loads(buf[start : start + hlen].decode("utf-8"))
    params = params_from_bytes(buf, start + hlen)
    cfg = ModelConfig.from_dict(header["model"])
    return params, cfg, header


def history_row(round_index, loss, metrics=None, test_metrics=None, weights_hash="",
                bytes_up=0, bytes_down=0, seconds=0.0) -> dict:
    row = {c: None for c in HISTORY_COLUMNS}
    row.update(round=round_index, weights_hash=weights_hash, loss=loss,
               bytes_up=bytes_up, bytes_down=bytes_down, round_seconds=seconds)
    for prefix, rep in (("val_", metrics), ("test_", test_metrics)):
        if rep is not None:
            for k, v in rep.to_dict().items():
                if k != "task":
                    row[prefix + k] = v
    return row


def write_history(rows, directory, stem: str = "history") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json``; returns both paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    csv_path = directory / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r[k] for k in HISTORY_COLUMNS})
    json_path = directory / f"{stem}.json"
    json_path.write_text(json.dumps(rows, indent=1))
    return csv_path, json_path


def read_history(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"history file {path} does not exist")
    if path.suffix == ".json":
        return json.loads(path.read_text())
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out = {}
            for k, v in r.items():
                if v == "":
                    out[k] = None
                elif k == "weights_hash":
                    out[k] = v
                else:
                    f = float(v)
                    out[k] = int(f) if k in ("round", "val_n", "test_n", "bytes_up", "bytes_down") else f
            rows.append(out)
    return rows


TASK_METRICS = {
    "classification": ("accuracy", "macro_f1", "macro_auc"),
    "regression": ("mae", "rmse", "r2"),
}


def long_format(runs, metrics=None) -> list[tuple]:
    """Flatten ``{label: rows}`` into ``(run, round, metric, value)`` tuples.

    Without an explicit ``metrics`` list each run contributes its loss plus
    the three task metrics, taken from the test columns when the run has
    them and from the validation columns otherwise.
    """
    out = []
    for label, rows in runs.items():
        names = metrics
        if names is None:
            first = rows[0] if rows else {}
            prefix = "test_" if first.get("test_n") is not None else "val_"
            task = "classification" if first.get(prefix + "accuracy") is not None else "regression"
            names = ("loss",) + tuple(prefix + m for m in TASK_METRICS[task])
        for r in rows:
            for m in names:
                if r.get(m) is not None:
                    out.append((label, r["round"], m, r[m]))
    return out
