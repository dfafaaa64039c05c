"""Metrics CSV, JSON run summary and evaluation records."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

from .config import RunConfig

METRICS_HEADER = ("epoch", "train_loss", "lr", "knn_acc", "probe_acc", "wall_time_s")
EVALS_HEADER = ("kind", "checkpoint", "config_hash", "epoch", "setting", "accuracy", "n_eval")
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
EVALS_FILE = "evals.csv"


class MetricsError(OSError):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def ensure_writable(out_dir) -> Path:
    """Create ``out_dir`` and prove a file can be written there."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("ok")
        probe.unlink()
    except OSError as e:
        raise MetricsError(f"output directory {out} is not writable: {e.strerror or e}") from None
    return out


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise MetricsError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append({k: (None if r[k] == "" else (int(r[k]) if k == "epoch" else float(r[k]))) for k in METRICS_HEADER})
    return rows


class MetricsWriter:
    """Single writer for a run's ``metrics.csv`` and ``summary.json``.

    The directory is checked for writability on construction, before any
    training happens. ``truncate_after`` drops rows past a resume point so
    replayed epochs never appear twice.
    """

    def __init__(self, out_dir, cfg: RunConfig):
        self.dir = ensure_writable(out_dir)
        self.cfg = cfg
        self.path = self.dir / METRICS_FILE

    def rows(self) -> list[dict]:
        return read_metrics(self.path) if self.path.exists() else []

    def truncate_after(self, epoch: int) -> None:
        keep = [r for r in self.rows() if r["epoch"] <= epoch]
        self._rewrite(keep)

    def _rewrite(self, rows) -> None:
        tmp = self.path.with_name(METRICS_FILE + ".tmp")
        with open(tmp, "w", newline="") as f:
            f.write(",".join(METRICS_HEADER) + "\n")
            for r in rows:
                f.write(",".join(_fmt(r.get(k)) for k in METRICS_HEADER) + "\n")
        os.replace(tmp, self.path)

    def append(self, row: dict) -> None:
        existing = {r["epoch"] for r in self.rows()}
        if row["epoch"] in existing:
            raise MetricsError(f"{self.path}: epoch {row['epoch']} already logged")
        if not self.path.exists():
            self._rewrite([])
        with open(self.path, "a", newline="") as f:
            f.write(",".join(_fmt(row.get(k)) for k in METRICS_HEADER) + "\n")

    def write_summary(self, state, rows=None) -> Path:
        rows = self.rows() if rows is None else rows
        final = rows[-1] if rows else {}
        summary = {
            "config_hash": self.cfg.config_hash(),
            "config": self.cfg.to_dict(),
            "epochs": state.epoch,
            "steps": state.step,
            "final": {k: final.get(k) for k in METRICS_HEADER},
        }
        path = self.dir / SUMMARY_FILE
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return path


def append_eval(out_dir, record: dict) -> Path:
    """Append one evaluation record (probe, knn, finetune, corruption) to ``evals.csv``."""
    path = ensure_writable(out_dir) / EVALS_FILE
    new = not path.exists()
    with open(path, "a", newline="") as f:
        if new:
            f.write(",".join(EVALS_HEADER) + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow([_fmt(record.get(k)) for k in EVALS_HEADER])
    return path


def read_evals(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / EVALS_FILE
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
