"""Command-line entry point.

    muleeg synth-data --subjects 24 --epochs 200 --seed 1 --out data/synth
    muleeg split --data data/synth --counts 16,4,4 --seed 1 --out data/split.json
    muleeg pretrain --strategy muleeg --data data/synth --split data/split.json --out runs/m
    muleeg evaluate --protocol linear --ckpt runs/m --data data/synth --split data/split.json --out runs/m/eval
    muleeg sweep --data data/synth --split data/split.json --out runs/sweep
    muleeg export-embeddings --ckpt runs/m --data data/synth --split data/split.json --out emb.csv
    muleeg plot --kind loss --csv runs/m/losses.csv --out loss.png

Failures print one line ``error[<category>]: <message>`` on stderr and exit
non-zero (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .config import RunConfig, build_run_config, load_toml, parse_id_list, resolve_data_path
from .data import (CacheFormatError, DatasetSplit, LeakageError, MissingChannelError, cache_read, cache_subjects,
                   cache_write, split_subjects, synth_generate)
from .evaluate import (DEFAULT_FRACTIONS, DEFAULT_SWEEP, SEMI_COLUMNS, SWEEP_COLUMNS, export_embeddings, fine_tune,
                       kfold_evaluate, linear_evaluate, semi_rows, semi_supervised_curve, write_rows)
from .pretrain import ConfigError, StrategyKind, TrainingDivergedError, load_checkpoint, pretrain
from .transforms import InvalidConfigError, InvalidInputError

log = logging.getLogger("muleeg")

EXIT_CODES = {"internal": 1, "usage": 2, "config": 3, "file": 4, "data": 5, "leakage": 6, "training": 7}
STRATEGIES = [s.value for s in StrategyKind]
PROTOCOLS = ("linear", "finetune", "semi", "kfold")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class Parser(argparse.ArgumentParser):
    """Argument errors become a single machine-parsable line."""

    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, (ConfigError, InvalidConfigError)):
        return "config"
    if isinstance(exc, LeakageError):
        return "leakage"
    if isinstance(exc, TrainingDivergedError):
        return "training"
    if isinstance(exc, (CacheFormatError, MissingChannelError, InvalidInputError)):
        return "data"
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return "file"
    if isinstance(exc, ValueError):
        return "data"
    return "internal"


# --- shared helpers --------------------------------------------------------

def _file_values(args) -> dict:
    return load_toml(args.config) if getattr(args, "config", None) else {}


def _strategy(name: str) -> StrategyKind:
    try:
        return StrategyKind(name)
    except ValueError:
        raise CliError("usage", f"unknown strategy {name!r}; valid: {', '.join(STRATEGIES)}") from None


def _data_dir(args, file_values: dict) -> Path:
    value = args.data or file_values.get("data", {}).get("cache")
    if not value:
        raise CliError("usage", "--data is required (or set [data] cache in the config)")
    path = resolve_data_path(value)
    if not path.is_dir():
        raise CliError("file", f"data cache not found: {path}")
    return path


def _split(args, file_values: dict) -> Optional[DatasetSplit]:
    value = args.split or file_values.get("data", {}).get("split")
    if not value:
        return None
    path = resolve_data_path(value)
    if not path.exists():
        raise CliError("file", f"split file not found: {path}")
    return DatasetSplit.from_json(path.read_text())


def _records(data_dir: Path, ids: Optional[Sequence[str]]):
    if ids is not None and not ids:
        raise CliError("data", "empty subject list")
    return cache_read(data_dir, ids)


def _dump(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --- commands --------------------------------------------------------------

def cmd_synth_data(args) -> int:
    if args.subjects < 1 or args.epochs < 1:
        raise CliError("usage", "--subjects and --epochs must be positive")
    records = synth_generate(args.subjects, args.epochs, seed=args.seed, rate=args.rate)
    paths = cache_write(records, args.out)
    _dump(Path(args.out) / "synth.json", {"subjects": args.subjects, "epochs": args.epochs, "seed": args.seed,
                                          "sample_rate_hz": args.rate})
    print(f"wrote {len(paths)} subjects to {args.out}")
    return 0


def cmd_split(args) -> int:
    counts = tuple(int(c) for c in args.counts.split(","))
    if len(counts) != 3:
        raise CliError("usage", "--counts takes pretext,train,test")
    subjects = cache_subjects(resolve_data_path(args.data))
    split = split_subjects(subjects, counts, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(split.to_json())
    print(f"pretext={len(split.pretext)} train={len(split.train)} test={len(split.test)} -> {out}")
    return 0


def _pretrain_overrides(args) -> dict:
    return {
        "strategy": args.strategy, "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
        "tau": args.tau, "tau_d": args.tau_d, "lambda1": args.lambda1, "lambda2": args.lambda2,
        "use_diverse": args.diverse, "use_fusion": args.fusion, "supervised_view": args.view,
        "width_multiplier": args.width,
    }


def cmd_pretrain(args) -> int:
    file_values = _file_values(args)
    strategy = args.strategy or file_values.get("pretrain", {}).get("strategy", "muleeg")
    args.strategy = _strategy(strategy).value
    data_dir = _data_dir(args, file_values)
    split = _split(args, file_values)
    run = build_run_config(file_values, pretrain=_pretrain_overrides(args), seed=args.seed, preset=args.preset,
                           data={"cache": str(data_dir), "split": args.split})
    ids = parse_id_list(args.subjects)
    if ids is None and split is not None:
        ids = split.pretext
    records = _records(data_dir, ids)
    torch.set_num_threads(args.threads)
    out = Path(args.out)
    run.write(out)
    ckpt = pretrain(run.pretrain.strategy, records, run.pretrain, out)
    last = ckpt.history[-1]["total"] if ckpt.history else float("nan")
    print(f"{run.pretrain.strategy.value}: {len(ckpt.history)} epochs, final loss {last:.4f} -> {out}")
    return 0


def _eval_run(args, file_values: dict) -> RunConfig:
    overrides = {"linear_epochs": args.linear_epochs, "finetune_epochs": args.finetune_epochs,
                 "n_seeds": args.n_seeds, "view": args.view}
    return build_run_config(file_values, eval=overrides, seed=args.seed, preset=args.preset,
                            data={"checkpoint": str(args.ckpt)})


def cmd_evaluate(args) -> int:
    file_values = _file_values(args)
    run = _eval_run(args, file_values)
    ckpt = load_checkpoint(args.ckpt, args.which)
    data_dir = _data_dir(args, file_values)
    split = _split(args, file_values)
    train_ids = parse_id_list(args.train) or (split.train if split else None)
    test_ids = parse_id_list(args.test) or (split.test if split else None)
    if not train_ids or not test_ids:
        raise CliError("usage", "train/test subjects are required (--train/--test or --split)")
    torch.set_num_threads(args.threads)
    out = Path(args.out)
    run.write(out)
    ecfg = run.eval
    protocol = args.protocol
    if protocol == "semi":
        fractions = [float(f) for f in args.fractions.split(",")] if args.fractions else DEFAULT_FRACTIONS
        reports = semi_supervised_curve(ckpt, _records(data_dir, train_ids), _records(data_dir, test_ids), ecfg,
                                        fractions)
        rows = semi_rows(reports)
        write_rows(rows, out / "semi.csv", SEMI_COLUMNS)
        _dump(out / "semi.json", [r.to_dict() for r in reports])
        for row in rows:
            print(f"fraction {row['fraction']:g}: mf1 {row['macro_f1']:.4f}")
        return 0
    if protocol == "kfold":
        report = kfold_evaluate(ckpt, _records(data_dir, list(train_ids) + list(test_ids)), args.folds, ecfg)
    elif protocol == "finetune":
        report = fine_tune(ckpt, _records(data_dir, train_ids), _records(data_dir, test_ids), ecfg)
    else:
        report = linear_evaluate(ckpt, _records(data_dir, train_ids), _records(data_dir, test_ids), ecfg)
    (out / "report.json").write_text(report.to_json() + "\n")
    m = report.metrics
    row = {"protocol": protocol, "accuracy": m.accuracy, "kappa": m.kappa, "macro_f1": m.macro_f1}
    write_rows([row], out / "metrics.csv", ("protocol", "accuracy", "kappa", "macro_f1"))
    print(f"{protocol}: acc {m.accuracy:.4f} kappa {m.kappa:.4f} mf1 {m.macro_f1:.4f}")
    return 0


def _sweep_grid(args, file_values: dict) -> dict:
    if args.param:
        if not args.values:
            raise CliError("usage", "--param needs --values")
        return {args.param: [float(v) for v in args.values.split(",")]}
    grid = file_values.get("sweep") or DEFAULT_SWEEP
    bad = set(grid) - set(DEFAULT_SWEEP)
    if bad:
        raise CliError("config", f"unknown sweep parameter(s): {', '.join(sorted(bad))}")
    return {k: [float(v) for v in vals] for k, vals in grid.items()}


def _run_child(argv: list[str]) -> None:
    cmd = [sys.executable, "-m", "muleeg.cli", *argv]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        line = (proc.stderr.strip().splitlines() or ["child failed"])[-1]
        raise CliError("training" if "pretrain" in argv[:1] else "internal", f"sweep point failed: {line}")


def cmd_sweep(args) -> int:
    """Each grid point is pretrained and evaluated in its own subprocess."""
    file_values = _file_values(args)
    grid = _sweep_grid(args, file_values)
    data_dir = _data_dir(args, file_values)
    if _split(args, file_values) is None:
        raise CliError("usage", "sweep needs --split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    common = ["--data", str(data_dir), "--split", str(resolve_data_path(args.split)), "--preset", args.preset,
              "--threads", str(args.threads)]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    if args.config:
        common += ["--config", str(args.config)]
    rows = []
    for param, values in grid.items():
        for value in values:
            point = out / f"{param}={value:g}"
            pre = ["pretrain", "--strategy", "muleeg", "--out", str(point), f"--{param.replace('_', '-')}",
                   repr(value), *common]
            if args.epochs is not None:
                pre += ["--epochs", str(args.epochs)]
            _run_child(pre)
            ev = ["evaluate", "--protocol", "linear", "--ckpt", str(point), "--out", str(point / "eval"), *common]
            _run_child(ev)
            m = json.loads((point / "eval" / "report.json").read_text())["metrics"]
            rows.append({"param": param, "value": value, **{k: m[k] for k in ("accuracy", "kappa", "macro_f1")}})
            print(f"{param}={value:g}: mf1 {m['macro_f1']:.4f}")
    write_rows(rows, out / "sweep.csv", SWEEP_COLUMNS)
    return 0


def cmd_export_embeddings(args) -> int:
    ckpt = load_checkpoint(args.ckpt, args.which)
    data_dir = _data_dir(args, {})
    ids = parse_id_list(args.subjects)
    if ids is None:
        split = _split(args, {})
        ids = split.test if split is not None else None
    feats, labels = export_embeddings(ckpt, _records(data_dir, ids), args.n_per_class, args.seed, args.out,
                                      args.view)
    print(f"exported {len(labels)} embeddings of dim {feats.shape[1] if feats.ndim == 2 else 0} -> {args.out}")
    return 0


def _read_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise CliError("file", f"csv not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError("data", f"{path} has no rows")
    return rows


def _labelled(spec: str) -> tuple[str, str]:
    if "=" in spec:
        label, path = spec.split("=", 1)
        return label, path
    return Path(spec).stem, spec


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if args.kind == "sweep":
        rows = _read_csv(args.csv[0])
        params = sorted({r["param"] for r in rows})
        fig, axes = plt.subplots(1, len(params), figsize=(4 * len(params), 3.2), squeeze=False)
        for ax, param in zip(axes[0], params):
            pts = sorted((float(r["value"]), float(r["macro_f1"])) for r in rows if r["param"] == param)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
            ax.set_xscale("log")
            ax.set_xlabel(param)
            ax.set_ylabel("macro F1")
    else:
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for spec in args.csv:
            label, path = _labelled(spec)
            rows = _read_csv(path)
            if args.kind == "loss":
                epochs = [int(r["epoch"]) for r in rows]
                for key in ("l_tt", "l_ss", "l_ff", "l_d", "total"):
                    vals = [float(r[key]) for r in rows]
                    if any(vals):
                        ax.plot(epochs, vals, label=f"{label} {key}" if len(args.csv) > 1 else key)
                ax.set_xlabel("training epoch")
                ax.set_ylabel("loss")
            else:
                x = [100 * float(r["fraction"]) for r in rows]
                y = [float(r["macro_f1"]) for r in rows]
                err = [float(r.get("macro_f1_std") or 0) for r in rows]
                ax.errorbar(x, y, yerr=err, marker="o", capsize=3, label=label)
                ax.set_xscale("log")
                ax.set_xlabel("labelled train data (%)")
                ax.set_ylabel("macro F1")
        ax.legend(fontsize=8)
    fig.tight_layout()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"wrote {out}")
    return 0


# --- parser ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", type=Path, help="TOML file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=("paper", "desk"), default="desk")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    if data:
        p.add_argument("--data", help="subject cache directory (relative paths fall back to $MULEEG_DATA_ROOT)")
        p.add_argument("--split", help="split JSON written by the split command")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="muleeg", description=__doc__.split("\n\n")[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic sleep cohort into a cache")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--epochs", type=int, required=True, help="30 s epochs per subject")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("split", help="subject-disjoint pretext/train/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--counts", required=True, help="pretext,train,test subject counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="pretrain an encoder (or train a baseline)")
    _common(p)
    p.add_argument("--strategy", metavar="NAME", help=f"one of: {', '.join(STRATEGIES)}")
    p.add_argument("--subjects", help="comma list or @file; defaults to the split's pretext group")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--tau-d", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--diverse", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--fusion", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--view", choices=("time", "spectrogram"), help="encoder for the supervised baseline")
    p.add_argument("--width", type=float, help="channel width multiplier")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", help="downstream evaluation of a checkpoint")
    _common(p)
    p.add_argument("--protocol", choices=PROTOCOLS, default="linear")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--which", choices=("last", "best"), default="last")
    p.add_argument("--train", help="comma list or @file")
    p.add_argument("--test", help="comma list or @file")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fractions", help="comma list for the semi protocol")
    p.add_argument("--linear-epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--view", choices=("auto", "time", "spectrogram"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="tau_d / lambda sensitivity sweep")
    _common(p)
    p.add_argument("--param", choices=tuple(DEFAULT_SWEEP))
    p.add_argument("--values", help="comma list for --param")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings", help="encoder features per class to CSV")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--which", choices=("last", "best"), default="last")
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--subjects")
    p.add_argument("--n-per-class", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--view", choices=("auto", "time", "spectrogram"), default="auto")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("plot", help="render loss, semi-supervised or sweep curves")
    p.add_argument("--kind", choices=("loss", "semi", "sweep"), required=True)
    p.add_argument("--csv", action="append", required=True, help="path or label=path; repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except KeyboardInterrupt:
        print("error[interrupted]: stopped by user", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        category = _category(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error[{category}]: {message}", file=sys.stderr)
        if category == "internal":
            log.debug("traceback", exc_info=True)
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
