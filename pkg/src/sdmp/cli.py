"""Command-line experiment runner.

Subcommands: pretrain, probe, knn, finetune, corrupt-eval, ablate, export-plot.
Results are printed as one line per record of space-separated ``key=value``
fields. Failures print one ``error: <Type>: <message>`` line to stderr and
exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import evaluation as E
from . import metrics as M
from . import trainer
from .config import ConfigError, dump_config, field_names, format_value, parse_config
from .data import DatasetError
from .mixing import MixingError

log = logging.getLogger("sdmp")

# weight modes x lambda sharing x strategy sets x view policy
DEFAULT_GRID = (
    ("weight_source", ("random", "static")),
    ("lambda_mode", ("per_sample", "per_batch")),
    ("strategies", ("mixup", "cutmix", "resizemix", "mixup,cutmix,resizemix")),
    ("view_policy", ("replace", "extra")),
)

EXPECTED_ERRORS = (
    ConfigError,
    DatasetError,
    MixingError,
    ckpt.CheckpointError,
    E.EvaluationError,
    M.MetricsError,
    trainer.TrainingError,
    OSError,
    ValueError,
)


def emit(record: str, **fields) -> None:
    parts = [record] + [f"{k}={_show(v)}" for k, v in fields.items()]
    print(" ".join(parts), flush=True)


def _show(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return format_value(v).replace(" ", "_")


# ----------------------------------------------------------------------
# argument parsing


def _add_overrides(p: argparse.ArgumentParser, skip=()) -> None:
    g = p.add_argument_group("config overrides (take precedence over --config)")
    for name in field_names():
        if name in skip:
            continue
        g.add_argument(f"--{name.replace('_', '-')}", dest=f"ov_{name}", metavar="VALUE", default=None)


def _overrides(args) -> dict:
    return {k[3:]: v for k, v in vars(args).items() if k.startswith("ov_") and v is not None}


def _config(args):
    return parse_config(getattr(args, "config", None), _overrides(args))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdmp", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress and the resolved config")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("pretrain", help="self-supervised pretraining run")
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--out", type=Path, required=True, help="run directory for metrics and checkpoints")
    p.add_argument("--no-resume", action="store_true", help="ignore checkpoints already in --out")
    _add_overrides(p)

    for name, helptext in (("probe", "linear probe on frozen features"), ("knn", "k-NN accuracy on frozen features")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--ckpt", type=Path, required=True)
        if name == "probe":
            p.add_argument("--epochs", type=int, default=None, help="probe epochs (default: config probe_epochs)")
            p.add_argument("--lr", type=float, default=None, help="probe lr (default: config probe_lr)")
            p.add_argument("--seed", type=int, default=0)
        else:
            p.add_argument("--k", type=int, default=None, help="neighbours (default: config knn_k)")
            p.add_argument("--weighting", choices=("cosine", "uniform"), default="cosine")

    p = sub.add_parser("finetune", help="end-to-end finetune on a labeled fraction")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path, help="pretrained checkpoint to start from")
    src.add_argument("--random-init", action="store_true", help="start from a fresh encoder (supervised baseline)")
    p.add_argument("--config", type=Path, help="config for --random-init")
    p.add_argument("--fraction", type=float, action="append", help="labeled fraction; repeatable (default 0.01, 0.1, 1.0)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--finetune-seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="directory for evals.csv (default: checkpoint directory)")
    _add_overrides(p, skip=("epochs",))

    p = sub.add_parser("corrupt-eval", help="probe accuracy under synthetic corruptions")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--corruption", choices=E.CORRUPTIONS, action="append",
                   help="repeatable (default: all corruptions)")
    p.add_argument("--severities", default="0,1,2,3,4,5")
    p.add_argument("--probe-epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="pretrain every point of a config grid")
    p.add_argument("--config", type=Path, help="base config file")
    p.add_argument("--out", type=Path, required=True, help="parent directory of the run directories")
    p.add_argument("--grid", action="append", metavar="KEY=V1;V2",
                   help="grid axis, repeatable; values split on ';' if present, else ','")
    p.add_argument("--dry-run", action="store_true", help="create run directories and configs without training")
    _add_overrides(p)

    p = sub.add_parser("export-plot", help="write curve series as CSV and render PNG figures")
    p.add_argument("--run", type=Path, action="append", required=True, help="run directory; repeatable")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-figures", action="store_true", help="CSV series only")
    return parser


# ----------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    M.ensure_writable(args.out)
    (args.out / "config.cfg").write_text(dump_config(cfg))
    state, rows = trainer.run_training(cfg, args.out, resume=not args.no_resume)
    final = rows[-1] if rows else {}
    emit("pretrain", run_dir=str(args.out), config_hash=cfg.config_hash(), epochs=state.epoch, steps=state.step,
         train_loss=final.get("train_loss", state.loss_history[-1] if state.loss_history else None))
    return 0


def _load(path: Path):
    state, cfg = ckpt.load_checkpoint(path)
    train, test = trainer.load_datasets(cfg)
    return state, cfg, train, test


def cmd_probe(args) -> int:
    state, cfg, train, test = _load(args.ckpt)
    epochs = args.epochs or cfg.probe_epochs
    lr = args.lr or cfg.probe_lr
    res = E.linear_probe(state.student, train, test, epochs, lr, seed=args.seed, config_hash=cfg.config_hash())
    M.append_eval(args.ckpt.parent, {"kind": "probe", "checkpoint": args.ckpt.name, "config_hash": res.config_hash,
                                     "epoch": state.epoch, "setting": f"epochs={epochs};lr={lr}",
                                     "accuracy": res.top1, "n_eval": res.n_eval})
    emit("probe", ckpt=str(args.ckpt), config_hash=res.config_hash, epoch=state.epoch, top1=res.top1,
         n_eval=res.n_eval, per_class=",".join(f"{a:.4f}" for a in res.per_class))
    return 0


def cmd_knn(args) -> int:
    state, cfg, train, test = _load(args.ckpt)
    k = args.k or cfg.knn_k
    acc = E.knn_eval(state.student, train, test, k, args.weighting)
    M.append_eval(args.ckpt.parent, {"kind": "knn", "checkpoint": args.ckpt.name, "config_hash": cfg.config_hash(),
                                     "epoch": state.epoch, "setting": f"k={k};{args.weighting}",
                                     "accuracy": acc, "n_eval": len(test)})
    emit("knn", ckpt=str(args.ckpt), config_hash=cfg.config_hash(), k=k, accuracy=acc, n_eval=len(test))
    return 0


def cmd_finetune(args) -> int:
    if args.ckpt is not None:
        state, cfg, train, test = _load(args.ckpt)
        params, origin, out = state.student, args.ckpt.name, args.out or args.ckpt.parent
    else:
        cfg = _config(args)
        train, test = trainer.load_datasets(cfg)
        params, origin, out = trainer.init_state(cfg).student, "random_init", args.out
    for frac in args.fraction or (0.01, 0.1, 1.0):
        acc = E.fraction_finetune(params, train, test, frac, args.epochs, args.lr, seed=args.finetune_seed)
        if out is not None:
            M.append_eval(out, {"kind": "finetune", "checkpoint": origin, "config_hash": cfg.config_hash(),
                                "setting": f"fraction={frac};epochs={args.epochs}", "accuracy": acc,
                                "n_eval": len(test)})
        emit("finetune", init=origin, fraction=frac, epochs=args.epochs, accuracy=acc)
    return 0


def cmd_corrupt(args) -> int:
    state, cfg, train, test = _load(args.ckpt)
    try:
        severities = [int(s) for s in args.severities.split(",")]
    except ValueError:
        raise ConfigError(f"severities: expected comma-separated integers, got {args.severities!r}") from None
    probe = E.linear_probe(state.student, train, test, args.probe_epochs or cfg.probe_epochs, cfg.probe_lr,
                           seed=args.seed, config_hash=cfg.config_hash())
    for corruption in args.corruption or E.CORRUPTIONS:
        accs = E.corruption_eval(state.student, probe, test, corruption, severities, seed=args.seed)
        for sev, acc in accs.items():
            M.append_eval(args.ckpt.parent, {"kind": "corrupt", "checkpoint": args.ckpt.name,
                                             "config_hash": cfg.config_hash(), "epoch": state.epoch,
                                             "setting": f"{corruption};severity={sev}", "accuracy": acc,
                                             "n_eval": len(test)})
            emit("corrupt", ckpt=str(args.ckpt), corruption=corruption, severity=sev, accuracy=acc)
    return 0


def parse_grid(specs) -> list[tuple[str, tuple]]:
    if not specs:
        return [(k, v) for k, v in DEFAULT_GRID]
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"grid: expected KEY=V1,V2, got {spec!r}")
        key, values = (s.strip() for s in spec.split("=", 1))
        key = key.replace("-", "_")
        if key not in field_names():
            raise ConfigError(f"grid: unknown key {key!r}")
        sep = ";" if ";" in values else ","
        vals = tuple(v.strip() for v in values.split(sep) if v.strip())
        if not vals:
            raise ConfigError(f"grid: no values for {key!r}")
        axes.append((key, vals))
    return axes


def grid_configs(base_overrides: dict, config_path, axes) -> list:
    keys = [k for k, _ in axes]
    out = []
    for combo in itertools.product(*(v for _, v in axes)):
        ov = dict(base_overrides)
        ov.update(zip(keys, combo))
        out.append((dict(zip(keys, combo)), parse_config(config_path, ov, echo=False)))
    return out


def cmd_ablate(args) -> int:
    axes = parse_grid(args.grid)
    runs = grid_configs(_overrides(args), args.config, axes)
    M.ensure_writable(args.out)
    summary = args.out / "ablation.csv"
    keys = [k for k, _ in axes]
    lines = ["run,config_hash," + ",".join(keys) + ",train_loss,knn_acc,probe_acc\n"]
    for i, (point, cfg) in enumerate(runs):
        run_dir = args.out / f"run{i:03d}_{cfg.config_hash()}"
        M.ensure_writable(run_dir)
        (run_dir / "config.cfg").write_text(dump_config(cfg))
        final = {}
        if not args.dry_run:
            _, rows = trainer.run_training(cfg, run_dir)
            final = rows[-1] if rows else (M.read_metrics(run_dir)[-1] if (run_dir / M.METRICS_FILE).exists() else {})
        vals = [f'"{point[k]}"' if "," in point[k] else point[k] for k in keys]
        lines.append(",".join([run_dir.name, cfg.config_hash()] + vals +
                              [M._fmt(final.get(c)) for c in ("train_loss", "knn_acc", "probe_acc")]) + "\n")
        emit("ablate", run=run_dir.name, config_hash=cfg.config_hash(), **point,
             train_loss=final.get("train_loss"))
    summary.write_text("".join(lines))
    emit("ablate_summary", path=str(summary), runs=len(runs))
    return 0


def cmd_export_plot(args) -> int:
    from .plotting import export_run

    for d in args.run:
        if not (Path(d) / M.METRICS_FILE).exists():
            raise FileNotFoundError(f"no {M.METRICS_FILE} in run directory {d}")
    for path in export_run(args.run, args.out, figures=not args.no_figures):
        emit("export", kind="figure" if path.suffix == ".png" else "series", path=str(path))
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "knn": cmd_knn,
    "finetune": cmd_finetune,
    "corrupt-eval": cmd_corrupt,
    "ablate": cmd_ablate,
    "export-plot": cmd_export_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except EXPECTED_ERRORS as e:
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
