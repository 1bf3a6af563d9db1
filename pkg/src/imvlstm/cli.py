"""Command-line interface: train / predict / importance / select / synth.

Exit codes: 0 success, 2 usage or data problems, 1 anything unexpected.
"""
import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import tomli

from . import dataio, evalx, trainer
from .cell import FULL, TENSOR, CellConfig
from .dataio import DataError
from .mixture import HeadConfig
from .trainer import CheckpointError, TrainConfig, TrainingError

log = logging.getLogger("imvlstm")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def _split_type(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(","))


def _opt_float(text):
    if text is None or (isinstance(text, str) and text.lower() in ("none", "off", "")):
        return None
    return float(text)


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    data: str | None = None
    target: str | None = None
    out: str = "run"
    window: int = 10
    split: tuple = (0.7, 0.1, 0.2)
    variant: str = TENSOR
    per_var_dim: int = 8
    forget_bias: float = 1.0
    head_width: int | None = None
    sigma_min: float = 1e-3
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 64
    l2_coeff: float = 1e-4
    grad_clip_norm: float | None = 5.0
    seed: int = 0
    shuffle: bool = True
    importance_every: int = 5

    def cell(self, n_vars: int) -> CellConfig:
        return CellConfig(n_vars, self.per_var_dim, variant=self.variant, forget_bias=self.forget_bias)

    def head(self, n_vars: int) -> HeadConfig:
        return HeadConfig(n_vars, self.per_var_dim, width=self.head_width, sigma_min=self.sigma_min)

    def train(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
                           l2_coeff=self.l2_coeff, grad_clip_norm=self.grad_clip_norm, seed=self.seed,
                           shuffle=self.shuffle)


CONVERTERS = {
    "data": str, "target": str, "out": str, "window": int, "split": _split_type, "variant": str,
    "per_var_dim": int, "forget_bias": float, "head_width": int, "sigma_min": float, "epochs": int,
    "learning_rate": float, "batch_size": int, "l2_coeff": float, "grad_clip_norm": _opt_float,
    "seed": int, "shuffle": _bool, "importance_every": int,
}
FLAG_ALIASES = {"learning_rate": ["--lr"]}


def _flatten(doc: dict, problems: list) -> dict:
    """Accept flat keys or one level of tables ([data], [model], [train], ...)."""
    flat = {}
    for key, value in doc.items():
        items = value.items() if isinstance(value, dict) else [(key, value)]
        for k, v in items:
            k = k.replace("-", "_")
            if k in flat:
                problems.append(f"{k}: given more than once in the config file")
            flat[k] = v
    return flat


def build_config(config_path: str | None, overrides: dict) -> RunConfig:
    """Merge defaults, the TOML file and flag overrides; report every problem at once."""
    problems = []
    raw = {}
    if config_path:
        try:
            with open(config_path, "rb") as fh:
                raw = _flatten(tomli.load(fh), problems)
        except OSError as exc:
            raise ConfigError([f"cannot read config {config_path}: {exc.strerror}"]) from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError([f"{config_path}: {exc}"]) from None
    raw.update({k: v for k, v in overrides.items() if v is not None})

    values = {}
    for key, value in raw.items():
        conv = CONVERTERS.get(key)
        if conv is None:
            problems.append(f"{key}: unknown setting")
            continue
        try:
            values[key] = conv(value)
        except (TypeError, ValueError):
            problems.append(f"{key}: cannot interpret {value!r}")
    cfg = RunConfig(**values)

    if not cfg.data:
        problems.append("data: a CSV path is required")
    if not cfg.target:
        problems.append("target: a target column name is required")
    if cfg.window < 1:
        problems.append(f"window: must be >= 1 (got {cfg.window})")
    if cfg.variant not in (FULL, TENSOR):
        problems.append(f"variant: must be {FULL!r} or {TENSOR!r} (got {cfg.variant!r})")
    if cfg.per_var_dim < 1:
        problems.append(f"per_var_dim: must be >= 1 (got {cfg.per_var_dim})")
    if cfg.head_width is not None and cfg.head_width < 1:
        problems.append(f"head_width: must be >= 1 (got {cfg.head_width})")
    if not cfg.sigma_min > 0:
        problems.append(f"sigma_min: must be > 0 (got {cfg.sigma_min})")
    if cfg.importance_every < 1:
        problems.append(f"importance_every: must be >= 1 (got {cfg.importance_every})")
    if len(cfg.split) != 3 or any(f < 0 for f in cfg.split) or abs(sum(cfg.split) - 1) > 1e-9:
        problems.append(f"split: need three non-negative fractions summing to 1 (got {cfg.split})")
    try:
        cfg.train()
    except ValueError as exc:
        problems.extend(str(exc).split("; "))
    if problems:
        raise ConfigError(problems)
    return cfg


# ------------------------------------------------------------------ commands

def _split_metrics(model, ds, stats) -> dict:
    out = {}
    for name in dataio.SPLITS:
        xs, ys = ds.part(name)
        if len(ys) == 0:
            out[name] = None
            continue
        y_hat = stats.invert_target(model.predict(xs))
        out[name] = evalx.metrics_report(stats.invert_target(ys), y_hat)
    return out


def _importance_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch"] + list(columns))
    for epoch, imp in rows:
        w.writerow([epoch] + [repr(float(v)) for v in imp])
    return buf.getvalue()


def cmd_train(args) -> int:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    cfg = build_config(args.config, overrides)
    table = dataio.load_csv(cfg.data, cfg.target)
    if table.dropped_rows:
        log.warning("dropped %d rows with missing values", table.dropped_rows)
    ds, stats = dataio.prepare(table, cfg.window, cfg.split)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    n = table.n_vars
    history = [(0, np.full(n, 1.0 / n))]
    hist_path = out / "importance_history.csv"
    trainer.atomic_write_text(hist_path, _importance_csv(table.columns, history))

    def on_epoch(rec):
        if not args.quiet:
            val = "nan" if rec.val_rmse is None else f"{rec.val_rmse:.6f}"
            print(f"epoch {rec.epoch} loss {rec.loss:.6f} val_rmse {val}", flush=True)
        if rec.epoch % cfg.importance_every == 0 or rec.epoch == cfg.epochs:
            history.append((rec.epoch, rec.importance.var_importance))
            trainer.atomic_write_text(hist_path, _importance_csv(table.columns, history))

    ck = trainer.fit(ds, cfg.cell(n), cfg.train(), head=cfg.head(n), standardization=stats, on_epoch=on_epoch)
    ck.meta["split"] = list(cfg.split)
    ck.meta["target"] = cfg.target
    metrics = {"seed": cfg.seed, "best_epoch": ck.meta["epoch"], **_split_metrics(ck.model, ds, stats)}
    trainer.save(ck, out / "checkpoint.json")
    trainer.atomic_write_text(out / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        test = metrics["test"]
        print(f"best epoch {ck.meta['epoch']}; test rmse {test['rmse']:.6f}" if test else
              f"best epoch {ck.meta['epoch']}")
    return EXIT_OK


def _load_matching(path, ck) -> dataio.SeriesTable:
    """Read ``path`` and reorder its columns to the checkpoint's order."""
    target = ck.columns[-1]
    table = dataio.load_csv(path, target)
    missing = [c for c in ck.columns if c not in table.columns]
    extra = [c for c in table.columns if c not in ck.columns]
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing columns {missing}")
        if extra:
            parts.append(f"unexpected columns {extra}")
        raise DataError(f"{path}: {' and '.join(parts)} (checkpoint expects {ck.columns})")
    return table.select(ck.columns)


def cmd_predict(args) -> int:
    ck = trainer.load(args.checkpoint)
    table = _load_matching(args.data, ck)
    T = ck.window
    L = table.n_rows
    if L < T:
        raise DataError(f"{args.data}: {L} rows is fewer than the window {T}")
    z = ck.standardization.apply(table.values) if ck.standardization else table.values
    starts = np.arange(L - T + 1)
    xs = z[starts[:, None] + np.arange(T)[None, :]]
    y_hat = ck.model.predict(xs)
    if ck.standardization:
        y_hat = ck.standardization.invert_target(y_hat)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["window_start", "y_true", "y_hat"])
    for s, p in zip(starts, y_hat):
        y_true = repr(float(table.values[s + T, -1])) if s + T < L else ""
        w.writerow([int(s), y_true, repr(float(p))])
    return EXIT_OK


def cmd_importance(args) -> int:
    ck = trainer.load(args.checkpoint)
    rep = evalx.importance_report(ck.columns, ck.importance.var_importance, ck.importance.temporal_importance)
    json.dump(rep, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_select(args) -> int:
    ck = trainer.load(args.checkpoint)
    table = _load_matching(args.data, ck)
    if args.ranking == "pearson":
        split = tuple(ck.meta.get("split", (0.7, 0.1, 0.2)))
        n_train = dataio.train_rows(table.n_rows, ck.window, split)
        exo = evalx.pearson_rank(table, n_train)
        ranking = exo + [table.n_vars - 1]
    else:
        ranking = evalx.rank_variables(ck.importance.var_importance)
    reduced = evalx.select_table(table, ranking, args.fraction, bottom=args.bottom)
    _write_table(reduced, args.out)
    return EXIT_OK


def _write_table(table, out):
    if out:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(table.columns)
        w.writerows([[repr(float(v)) for v in row] for row in table.values])
        trainer.atomic_write_text(out, buf.getvalue())
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(table.columns)
        w.writerows([[repr(float(v)) for v in row] for row in table.values])


def _driver(text):
    try:
        idx, lag, coef = text.split(":")
        return int(idx), int(lag), float(coef)
    except ValueError:
        raise argparse.ArgumentTypeError(f"driver must look like VAR:LAG:COEF, got {text!r}") from None


def cmd_synth(args) -> int:
    drivers = tuple(args.driver) if args.driver else evalx.DEFAULT_SPEC.drivers
    try:
        spec = evalx.SyntheticSpec(n_vars=args.n_vars, length=args.length, seed=args.seed, drivers=drivers,
                                   nonlinear=args.nonlinear, noise_std=args.noise, window=args.window)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    _write_table(evalx.generate_synthetic(spec), args.out)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _add_run_flags(p):
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        names = [flag] + FLAG_ALIASES.get(f.name, [])
        # raw strings; conversion and validation happen in build_config
        p.add_argument(*names, dest=f.name, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imvlstm", description="Interpretable multi-variable LSTM forecaster.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint.json, metrics.json and importance_history.csv")
    p.add_argument("--config", help="TOML config file; flags override its values")
    p.add_argument("-q", "--quiet", action="store_true", help="no per-epoch output")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write window_start,y_true,y_hat CSV to stdout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("importance", help="print the variable and temporal importance report as JSON")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("select", help="write a CSV with the top-ranked variables plus the target")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--ranking", choices=("importance", "pearson"), default="importance")
    p.add_argument("--bottom", action="store_true", help="keep the lowest-ranked variables instead")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("synth", help="write the synthetic benchmark CSV")
    d = evalx.DEFAULT_SPEC
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--length", type=int, default=d.length)
    p.add_argument("--n-vars", type=int, default=d.n_vars)
    p.add_argument("--noise", type=float, default=d.noise_std)
    p.add_argument("--window", type=int, default=d.window)
    p.add_argument("--driver", type=_driver, action="append", metavar="VAR:LAG:COEF",
                   help="1-based variable, lag and coefficient; repeatable (default 1:2:0.6 and 2:0:0.3)")
    p.add_argument("--nonlinear", action="store_true")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError) as exc:
        print(f"imvlstm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"imvlstm: training failed: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort report
        log.debug("unhandled", exc_info=True)
        print(f"imvlstm: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
