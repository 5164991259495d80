"""Command-line front end: generate, train, evaluate, ablate, forecast.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    REGIMES,
    GridFormatError,
    GridSample,
    LatLonGrid,
    generate_synthetic,
    read_grid,
    read_grid_with_meta,
    write_grid,
)
from .model import SOLVERS, VARIANTS, ModelConfig, build_variant
from .physics import LossWeights, MetricRow, MetricsReport
from .train import ForecastData, TrainConfig, epoch_log_csv, evaluate, rollout, train

log = logging.getLogger("stcvit")


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


# -- run configuration -----------------------------------------------------------------------
def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.split(",") if s.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(s) for s in text.split(",") if s.strip())


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


RUN_KEYS: dict[str, _Key] = {
    # model
    "variant": _Key(str, "full", f"one of {', '.join(VARIANTS)}"),
    "patch_size": _Key(int, 2, "patch side in grid cells"),
    "heads": _Key(int, 4, "attention heads"),
    "depth": _Key(int, 2, "encoder blocks"),
    "dim": _Key(int, 128, "token width"),
    "mlp_ratio": _Key(int, 4, "feed-forward hidden width / dim"),
    "dropout": _Key(float, 0.1, "dropout rate"),
    "ode_steps": _Key(int, 2, "fixed solver steps on [0, 1]"),
    "ode_solver": _Key(str, "rk4", f"one of {', '.join(SOLVERS)}"),
    # loss
    "alpha": _Key(float, 0.3, "kinetic energy weight"),
    "beta": _Key(float, 0.3, "potential energy weight"),
    "gamma": _Key(float, 0.8, "thermodynamic weight"),
    "energy_scaling": _Key(_bool, True, "divide energy terms by mean training energy"),
    # optimisation
    "epochs": _Key(int, 20, "training epochs"),
    "batch_size": _Key(int, 4, "mini-batch size"),
    "base_lr": _Key(float, 1e-3, "peak learning rate"),
    "warmup_fraction": _Key(float, 0.1, "warmup share of epochs"),
    "weight_decay": _Key(float, 1e-5, "decoupled weight decay"),
    "beta1": _Key(float, 0.9, "AdamW first moment decay"),
    "beta2": _Key(float, 0.999, "AdamW second moment decay"),
    "early_stopping": _Key(_bool, True, "stop after es_tolerance flat epochs"),
    "es_tolerance": _Key(int, 10, "early stopping patience in epochs"),
    "seed": _Key(int, 0, "model init and shuffling seed"),
    # data
    "train_fraction": _Key(float, 0.7, "leading share of the sequence used for training"),
    "val_fraction": _Key(float, 0.15, "following share used for validation"),
    "lead_steps": _Key(int, 1, "trained lead in multiples of dt"),
    # evaluation / ablation
    "leads": _Key(_float_list, (6.0,), "evaluation leads in hours (comma separated)"),
    "seeds": _Key(_int_list, (0, 1, 2), "ablation seeds (comma separated)"),
    "workers": _Key(int, 1, "parallel ablation processes"),
    # paths, overridden by command-line flags
    "data": _Key(str, "", "grid file path"),
    "out": _Key(str, "", "output directory"),
}


class RunConfig(dict):
    """Fully resolved key/value configuration."""

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values = {k: spec.default for k, spec in RUN_KEYS.items()}
        errors = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                errors.append(f"line {lineno}: expected key = value, got {raw.strip()!r}")
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in RUN_KEYS:
                errors.append(f"line {lineno}: unknown key {key!r}")
                continue
            try:
                values[key] = RUN_KEYS[key].parse(value)
            except ValueError as exc:
                errors.append(f"line {lineno}: {key}: {exc}")
        cfg = cls(values)
        errors += cfg.semantic_errors()
        if errors:
            raise UsageError("invalid configuration:\n  " + "\n  ".join(errors))
        return cfg

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls.parse("")

    def semantic_errors(self) -> list[str]:
        errs = []
        if self["variant"] not in VARIANTS:
            errs.append(f"variant: {self['variant']!r} not in {VARIANTS}")
        if self["ode_solver"] not in SOLVERS:
            errs.append(f"ode_solver: {self['ode_solver']!r} not in {SOLVERS}")
        for k in ("patch_size", "heads", "depth", "dim", "mlp_ratio", "ode_steps", "epochs", "batch_size",
                  "es_tolerance", "lead_steps", "workers"):
            if self[k] < 1:
                errs.append(f"{k}: must be >= 1, got {self[k]}")
        if self["dim"] >= 1 and self["heads"] >= 1 and self["dim"] % self["heads"]:
            errs.append(f"dim: {self['dim']} not divisible by heads {self['heads']}")
        if not 0.0 <= self["dropout"] < 1.0:
            errs.append(f"dropout: {self['dropout']} outside [0, 1)")
        for k in ("alpha", "beta", "gamma", "weight_decay", "base_lr"):
            if self[k] < 0:
                errs.append(f"{k}: must be >= 0, got {self[k]}")
        for k in ("warmup_fraction", "beta1", "beta2"):
            if not 0.0 < self[k] < 1.0:
                errs.append(f"{k}: must lie in (0, 1), got {self[k]}")
        if not (0 < self["train_fraction"] < 1 and 0 < self["val_fraction"] < 1
                and self["train_fraction"] + self["val_fraction"] < 1):
            errs.append("train_fraction and val_fraction must be positive with sum < 1")
        if not self["leads"] or any(x <= 0 for x in self["leads"]):
            errs.append("leads: need at least one positive lead")
        if not self["seeds"]:
            errs.append("seeds: need at least one seed")
        return errs

    def to_text(self) -> str:
        lines = []
        for k in RUN_KEYS:
            v = self[k]
            if isinstance(v, tuple):
                v = ",".join(_fmt_num(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def model_config(self, var_names, img_size, variant: str | None = None) -> ModelConfig:
        return ModelConfig(
            var_names, img_size, patch_size=self["patch_size"], heads=self["heads"], depth=self["depth"],
            dim=self["dim"], dropout=self["dropout"], ode_steps=self["ode_steps"], ode_solver=self["ode_solver"],
            variant=variant or self["variant"], mlp_ratio=self["mlp_ratio"],
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self["epochs"], batch_size=self["batch_size"], base_lr=self["base_lr"],
            warmup_fraction=self["warmup_fraction"], weight_decay=self["weight_decay"], beta1=self["beta1"],
            beta2=self["beta2"], early_stopping=self["early_stopping"], es_tolerance=self["es_tolerance"],
            seed=self["seed"] if seed is None else seed,
            weights=LossWeights(self["alpha"], self["beta"], self["gamma"]),
            energy_scaling=self["energy_scaling"],
        )


def _fmt_num(x) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def config_help() -> str:
    width = max(map(len, RUN_KEYS))
    rows = [f"  {k:<{width}}  {_show_default(s.default):<10} {s.help}" for k, s in RUN_KEYS.items()]
    return "config keys (key = value, '#' starts a comment; defaults shown):\n" + "\n".join(rows)


def _show_default(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt_num(x) for x in v)
    if v == "":
        return '""'
    return str(v).lower() if isinstance(v, bool) else str(v)


# -- helpers -------------------------------------------------------------------------------------
def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig.defaults()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    return RunConfig.parse(p.read_text())


def _resolve_path(flag: str | None, cfg: RunConfig, key: str) -> str:
    value = flag or cfg[key]
    if not value:
        raise UsageError(f"--{key} is required (flag or config key)")
    return value


def _read_data(path: str) -> list[GridSample]:
    if not Path(path).is_file():
        raise UsageError(f"data file not found: {path}")
    try:
        return read_grid(path)
    except GridFormatError as exc:
        raise UsageError(str(exc)) from None


def _forecast_data(samples, cfg: RunConfig, stats=None) -> ForecastData:
    return ForecastData(samples, cfg["train_fraction"], cfg["val_fraction"], cfg["lead_steps"], stats)


def _train_one(samples, cfg: RunConfig, variant: str, seed: int):
    data = _forecast_data(samples, cfg)
    mcfg = cfg.model_config(data.var_names, data.grid.shape, variant)
    model = build_variant(mcfg, seed)
    result = train(model, data, cfg.train_config(seed))
    return data, model, result


def _checkpoint(model, data: ForecastData, cfg: RunConfig, seed: int) -> Checkpoint:
    extra = {"seed": seed, "dt_hours": data.dt_hours, "run_config": cfg.to_text()}
    return Checkpoint(model.config, model.state_dict(), data.stats, extra)


def _run_config_of(ckpt: Checkpoint) -> RunConfig:
    return RunConfig.parse(ckpt.extra.get("run_config", ""))


# -- commands ------------------------------------------------------------------------------------
def _parent(path: str) -> Path:
    """Create the parent directory of an output file."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    try:
        h, w = (int(s) for s in args.grid.split(","))
        grid = LatLonGrid.regular(h, w)
    except ValueError as exc:
        raise UsageError(f"--grid: expected H,W ({exc})") from None
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    seq = generate_synthetic(grid, args.steps, args.seed, args.regime, dt_hours=args.dt_hours)
    try:
        _parent(args.out)
        n = write_grid(args.out, seq)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    print(f"generated {len(seq)} steps, {len(seq[0].var_names)} variables, {n} bytes -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    samples = _read_data(_resolve_path(args.data, cfg, "data"))
    out = Path(_resolve_path(args.out, cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    data, model, result = _train_one(samples, cfg, cfg["variant"], cfg["seed"])
    save_checkpoint(out / "model.stck", _checkpoint(model, data, cfg, cfg["seed"]))
    (out / "epoch_log.csv").write_text(epoch_log_csv(result.epoch_log))
    (out / "config.txt").write_text(cfg.to_text())
    summary = {
        "best_val_total": result.best_val,
        "stopped_epoch": result.stopped_epoch,
        "optimizer_steps": result.optimizer_steps,
        "final_epoch": result.epoch_log[-1],
    }
    (out / "loss_breakdown.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"trained {cfg['variant']} for {result.stopped_epoch} epochs; best val loss {result.best_val:.6g} -> {out}")
    return 0


def _leads(text: str | None, cfg: RunConfig) -> tuple[float, ...]:
    if text is None:
        return cfg["leads"]
    try:
        leads = _float_list(text)
    except ValueError:
        raise UsageError(f"--leads: expected comma-separated hours, got {text!r}") from None
    if not leads or any(x <= 0 for x in leads):
        raise UsageError("--leads: need positive lead times")
    return leads


def _check_leads(leads, dt_hours: float) -> None:
    for lead in leads:
        k = lead / dt_hours
        if abs(k - round(k)) > 1e-9:
            raise UsageError(f"lead {lead} h is not a multiple of dt = {dt_hours} h")


def _load_ckpt(path: str) -> Checkpoint:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_evaluate(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    cfg = _run_config_of(ckpt)
    samples = _read_data(args.data)
    leads = _leads(args.leads, cfg)
    _check_leads(leads, samples[0].dt_hours)
    data = _forecast_data(samples, cfg, ckpt.stats)
    report = evaluate(ckpt.build(), data, leads, split=args.split)
    if report.acc_undefined:
        print("warning: ACC undefined (zero anomaly energy) for some rows; reported as nan", file=sys.stderr)
    _parent(args.out).write_text(report.to_csv())
    print(f"evaluated {len(leads)} leads on {args.split} split -> {args.out}")
    return 0


def _ablate_job(job):
    samples, cfg, variant, seed = job
    data, model, result = _train_one(samples, cfg, variant, seed)
    report = evaluate(model, data, cfg["leads"], label=variant, include_persistence=False)
    return variant, seed, result.best_val, report


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    samples = _read_data(_resolve_path(args.data, cfg, "data"))
    out = Path(_resolve_path(args.out, cfg, "out"))
    _check_leads(cfg["leads"], samples[0].dt_hours)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(samples, cfg, v, s) for v in VARIANTS for s in cfg["seeds"]]
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"]) as ex:
            results = list(ex.map(_ablate_job, jobs))
    else:
        results = [_ablate_job(j) for j in jobs]

    rows, val_lines = [], ["variant,seed,best_val_total"]
    for variant in VARIANTS:
        mine = [r for r in results if r[0] == variant]
        val_lines += [f"{variant},{seed},{val!r}" for _, seed, val, _ in mine]
        for first in mine[0][3].rows:
            same = [
                next(x for x in rep.rows if x.variable == first.variable and x.lead_hours == first.lead_hours)
                for *_, rep in mine
            ]
            rows.append(MetricRow(first.variable, first.lead_hours, float(np.median([x.rmse for x in same])),
                                  float(np.median([x.acc for x in same])), variant))
    rows.sort(key=lambda r: (r.lead_hours, r.variable, VARIANTS.index(r.variant)))
    (out / "ablation.csv").write_text(MetricsReport(rows).to_csv())
    (out / "validation_loss.csv").write_text("\n".join(val_lines) + "\n")
    (out / "config.txt").write_text(cfg.to_text())
    for variant in VARIANTS:
        med = np.median([r[2] for r in results if r[0] == variant])
        print(f"{variant:<28} median best val loss {med:.6g}")
    return 0


def cmd_forecast(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    samples, meta = read_grid_with_meta(args.data) if Path(args.data).is_file() else (None, None)
    if samples is None:
        raise UsageError(f"data file not found: {args.data}")
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    if not 1 <= args.start < len(samples) or args.start + args.steps > len(samples) - 1:
        raise UsageError(
            f"--start {args.start} with --steps {args.steps} out of range for {len(samples)} samples "
            "(need 1 <= start and start + steps <= last index)"
        )
    names = ckpt.config.var_names
    preds = []
    if args.steps:
        x_prev = samples[args.start - 1].fields[None].astype(np.float64)
        x_curr = samples[args.start].fields[None].astype(np.float64)
        preds = rollout(ckpt.build(), x_prev, x_curr, args.steps, ckpt.stats, names, meta.dt_hours)
    seq = [
        GridSample(args.start + k + 1, p[0].astype(np.float32), names, meta.grid, meta.dt_hours)
        for k, p in enumerate(preds)
    ]
    n = write_grid(_parent(args.out), seq, meta.grid, names, meta.dt_hours)
    print(f"forecast {args.steps} steps from index {args.start}, {n} bytes -> {args.out}")
    return 0


# -- entry point ---------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="stcvit", description=__doc__, formatter_class=fmt, epilog=config_help())
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic grid file", formatter_class=fmt)
    g.add_argument("--grid", required=True, help="H,W cells")
    g.add_argument("--steps", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--regime", choices=REGIMES, default="solid_rotation")
    g.add_argument("--dt-hours", type=float, default=6.0)
    g.add_argument("--out", required=True, help="output grid file")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model", formatter_class=fmt, epilog=config_help())
    t.add_argument("--config", help="key = value run configuration (defaults if omitted)")
    t.add_argument("--data", help="grid file (overrides config key data)")
    t.add_argument("--out", help="output directory (overrides config key out)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="RMSE/ACC with persistence baseline", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--leads", help="comma-separated hours (default: checkpoint config, 6)")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", required=True, help="output CSV")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and compare all five variants", formatter_class=fmt,
                       epilog=config_help())
    a.add_argument("--config")
    a.add_argument("--data")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("forecast", help="autoregressive forecast to a grid file", formatter_class=fmt)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--start", type=int, required=True, help="index of the current state in the data file")
    f.add_argument("--steps", type=int, required=True, help="number of forecast steps (0 allowed)")
    f.add_argument("--out", required=True, help="output grid file")
    f.set_defaults(func=cmd_forecast)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
