"""Plot-data export: x/y series as CSV plus PNG figures rendered with matplotlib (Agg)."""

from __future__ import annotations

from pathlib import Path

from .metrics import read_evals, read_metrics

# (series name, metrics column, y label)
CURVES = (
    ("loss", "train_loss", "train loss"),
    ("lr", "lr", "learning rate"),
    ("knn_acc", "knn_acc", "kNN accuracy"),
    ("probe_acc", "probe_acc", "linear probe accuracy"),
)


def write_series(path, xs, ys, x_name: str = "x", y_name: str = "y") -> Path:
    path = Path(path)
    with open(path, "w") as f:
        f.write(f"{x_name},{y_name}\n")
        for x, y in zip(xs, ys):
            f.write(f"{x},{y!r}\n")
    return path


def run_series(run_dir) -> dict[str, tuple[list, list]]:
    """Non-empty per-epoch curves of one run directory."""
    rows = read_metrics(run_dir)
    out = {}
    for name, col, _ in CURVES:
        pts = [(r["epoch"], r[col]) for r in rows if r[col] is not None]
        if pts:
            out[name] = ([p[0] for p in pts], [p[1] for p in pts])
    return out


def export_run(run_dirs, out_dir, figures: bool = True) -> list[Path]:
    """Write ``<run>_<series>.csv`` for every run and, with ``figures``, one PNG per series.

    Several runs are overlaid on one figure per series.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    per_run = {}
    for d in run_dirs:
        d = Path(d)
        label = d.name or str(d)
        series = run_series(d)
        per_run[label] = series
        for name, (xs, ys) in series.items():
            written.append(write_series(out / f"{label}_{name}.csv", xs, ys, "epoch", name))
        evals = read_evals(d)
        if evals:
            written.append(_write_evals(out / f"{label}_evals.csv", evals))
    if figures:
        written += _render(per_run, out)
    return written


def _write_evals(path: Path, evals: list[dict]) -> Path:
    with open(path, "w") as f:
        f.write("kind,setting,accuracy\n")
        for e in evals:
            f.write(f"{e['kind']},{e['setting']},{e['accuracy']}\n")
    return path


def _render(per_run: dict, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for name, _, ylabel in CURVES:
        runs = {k: v[name] for k, v in per_run.items() if name in v}
        if not runs:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for label, (xs, ys) in runs.items():
            ax.plot(xs, ys, marker="o" if len(xs) < 20 else None, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        if len(runs) > 1:
            ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"{name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
