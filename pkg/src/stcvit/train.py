"""AdamW with cosine warmup, early stopping, training loop and rollout evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import (
    GridSample,
    LatLonGrid,
    NormalizationStats,
    derivative_names,
    fit_normalization,
    latitude_weights,
    temporal_derivative,
)
from .nn import Module
from .physics import (
    ChannelBindings,
    EnergyScales,
    LossWeights,
    MetricRow,
    MetricsReport,
    acc_metric,
    combined_loss,
    rmse_metric,
)
from .tensor import backward, no_grad

log = logging.getLogger(__name__)

EPOCH_LOG_COLUMNS = (
    "epoch",
    "lr",
    "train_total",
    "train_lat_mse",
    "train_kinetic",
    "train_potential",
    "train_thermo",
    "val_total",
)


class TrainingDiverged(RuntimeError):
    pass


# -- optimiser -----------------------------------------------------------------------------
@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5

    @classmethod
    def for_params(cls, params, **kwargs) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kwargs)


def adamw_step(params, grads: Sequence[np.ndarray | None], state: OptimizerState, lr: float) -> bool:
    """One decoupled-weight-decay Adam update in place.

    Returns False (and leaves everything untouched) when any gradient is
    non-finite.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    if not all(np.all(np.isfinite(g)) for g in grads):
        log.warning("non-finite gradient at optimizer step %d; skipping update", state.step + 1)
        return False
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p.data -= p.dtype.type(lr * state.weight_decay) * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * update).astype(p.dtype)
    return True


# -- schedule ----------------------------------------------------------------------------
@dataclass
class ScheduleConfig:
    total_epochs: int = 20
    steps_per_epoch: int = 1
    warmup_fraction: float = 0.10
    base_lr: float = 5e-5

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.total_epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("total_epochs and steps_per_epoch must be positive")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        """Whole warmup epochs, at least one step, always leaving one decay step."""
        if self.total_steps < 2:
            return 0
        warm = max(1, round(self.warmup_fraction * self.total_epochs) * self.steps_per_epoch)
        return min(warm, self.total_steps - 1)


def cosine_warmup_lr(step: int, schedule: ScheduleConfig) -> float:
    """Linear warmup to ``base_lr``, then half-cosine decay to zero at the last step."""
    total, warm = schedule.total_steps, schedule.warmup_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warm and step <= warm:
        return schedule.base_lr * step / warm
    progress = (step - warm) / (total - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- early stopping ---------------------------------------------------------------------
@dataclass
class EarlyStopState:
    tolerance: int = 10
    best: float = math.inf
    since_improvement: int = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        return self.since_improvement >= self.tolerance


# -- data preparation -------------------------------------------------------------------
def split_sequence(samples: Sequence[GridSample], train_fraction: float = 0.7, val_fraction: float = 0.15):
    """Contiguous, time-ordered train/val/test split."""
    n = len(samples)
    n_train = int(round(n * train_fraction))
    n_val = int(round(n * val_fraction))
    return list(samples[:n_train]), list(samples[n_train:n_train + n_val]), list(samples[n_train + n_val:])


def model_inputs(x_prev: np.ndarray, x_curr: np.ndarray, dt_hours: float, stats: NormalizationStats,
                 names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Normalised ``[N, 2V, H, W]`` stacks for both time steps.

    Both steps carry the same finite-difference derivative of the window.
    """
    deriv = (x_curr.astype(np.float64) - x_prev.astype(np.float64)) / dt_hours
    in_names = tuple(names) + derivative_names(names)
    curr = stats.apply(np.concatenate([x_curr, deriv], axis=-3), in_names)
    prev = stats.apply(np.concatenate([x_prev, deriv], axis=-3), in_names)
    return curr, prev


def fit_stats(train: Sequence[GridSample]) -> NormalizationStats:
    """Raw-field stats plus independent stats for each derivative channel."""
    raw = fit_normalization(train)
    derivs = np.stack([temporal_derivative(b, a) for a, b in zip(train[:-1], train[1:])])
    dstats = fit_normalization(derivs, derivative_names(raw.names))
    return NormalizationStats(raw.names + dstats.names, np.r_[raw.mean, dstats.mean], np.r_[raw.std, dstats.std])


@dataclass
class WindowArrays:
    x_curr: np.ndarray
    x_prev: np.ndarray
    target: np.ndarray
    times: np.ndarray  # time index of x_curr per window

    def __len__(self) -> int:
        return len(self.target)


class ForecastData:
    """A sample sequence with its time-disjoint splits and training-split statistics."""

    def __init__(self, samples: Sequence[GridSample], train_fraction: float = 0.7, val_fraction: float = 0.15,
                 lead_steps: int = 1, stats: NormalizationStats | None = None):
        if not samples:
            raise ValueError("empty sample sequence")
        self.samples = list(samples)
        self.grid: LatLonGrid = samples[0].grid
        self.var_names = samples[0].var_names
        self.dt_hours = samples[0].dt_hours
        self.lead_steps = lead_steps
        self.train, self.val, self.test = split_sequence(samples, train_fraction, val_fraction)
        self.stats = stats if stats is not None else fit_stats(self.train)
        self.energy_scales = EnergyScales.from_samples(self.train, ChannelBindings(self.var_names))
        self._cache: dict = {}

    def split(self, name: str) -> list[GridSample]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def windows(self, name: str, dtype=np.float32) -> WindowArrays:
        key = (name, np.dtype(dtype).str)
        if key not in self._cache:
            seq = self.split(name)
            n = len(seq) - 1 - self.lead_steps
            if n < 1:
                raise ValueError(f"{name} split of {len(seq)} samples is too short for lead {self.lead_steps}")
            fields = np.stack([s.fields for s in seq]).astype(np.float64)
            prev, curr = fields[:n], fields[1:n + 1]
            target = fields[1 + self.lead_steps:n + 1 + self.lead_steps]
            xc, xp = model_inputs(prev, curr, self.dt_hours, self.stats, self.var_names)
            tgt = self.stats.apply(target, self.var_names)
            times = np.array([s.time for s in seq[1:n + 1]])
            self._cache[key] = WindowArrays(xc.astype(dtype), xp.astype(dtype), tgt.astype(dtype), times)
        return self._cache[key]


# -- training ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    base_lr: float = 1e-3  # desk profile; the reference profile uses 5e-5
    warmup_fraction: float = 0.1
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    early_stopping: bool = True
    es_tolerance: int = 10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    energy_scaling: bool = True  # kinetic/potential as errors relative to mean training energy


@dataclass
class TrainResult:
    best_state: dict
    best_val: float
    epoch_log: list[dict]
    stopped_epoch: int
    optimizer_steps: int


def _param_dtype(model: Module):
    return model.parameters()[0].dtype


def _loss(model: Module, data: ForecastData, arr: WindowArrays, idx, weights: LossWeights, scaled: bool = True):
    nv = len(data.var_names)
    pred = model(arr.x_curr[idx], arr.x_prev[idx])
    bindings = ChannelBindings(data.var_names)
    return combined_loss(
        pred, arr.target[idx], arr.x_curr[idx][:, :nv], weights, bindings, data.grid,
        data.lead_steps * data.dt_hours * 3600.0, stats=data.stats, scales=data.energy_scales if scaled else None,
    )


def validation_loss(model: Module, data: ForecastData, weights: LossWeights, batch_size: int = 16,
                    scaled: bool = True) -> float:
    model.eval()
    arr = data.windows("val", _param_dtype(model))
    total = 0.0
    with no_grad():
        for start in range(0, len(arr), batch_size):
            idx = np.arange(start, min(start + batch_size, len(arr)))
            _, br = _loss(model, data, arr, idx, weights, scaled)
            total += br.total * len(idx)
    return total / len(arr)


def train(model: Module, data: ForecastData, config: TrainConfig) -> TrainResult:
    arr = data.windows("train", _param_dtype(model))
    n = len(arr)
    steps_per_epoch = math.ceil(n / config.batch_size)
    schedule = ScheduleConfig(config.epochs, steps_per_epoch, config.warmup_fraction, config.base_lr)
    params = model.parameters()
    opt = OptimizerState.for_params(params, beta1=config.beta1, beta2=config.beta2, weight_decay=config.weight_decay)
    stopper = EarlyStopState(config.es_tolerance)
    rng = np.random.default_rng(config.seed)
    best_state = model.state_dict()
    best_val = math.inf
    rows = []
    global_step = 0
    lr = 0.0
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        perm = rng.permutation(n)
        sums = np.zeros(5)
        for b in range(steps_per_epoch):
            idx = np.sort(perm[b * config.batch_size:(b + 1) * config.batch_size])
            model.zero_grad()
            loss, br = _loss(model, data, arr, idx, config.weights, config.energy_scaling)
            backward(loss)
            global_step += 1
            lr = cosine_warmup_lr(global_step, schedule)
            adamw_step(params, [p.grad for p in params], opt, lr)
            sums += len(idx) * np.array([br.total, br.lat_mse, br.kinetic, br.potential, br.thermo])
        val = validation_loss(model, data, config.weights, scaled=config.energy_scaling)
        if not math.isfinite(val):
            raise TrainingDiverged(f"validation loss is {val} at epoch {epoch}")
        means = sums / n
        rows.append(dict(zip(EPOCH_LOG_COLUMNS, [epoch, lr, *means.tolist(), val])))
        log.info("epoch %d lr %.3g train %.5g val %.5g", epoch, lr, means[0], val)
        if val < best_val:
            best_val = val
            best_state = model.state_dict()
        if stopper.update(val) and config.early_stopping:
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(best_state, best_val, rows, epoch, opt.step)


def epoch_log_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EPOCH_LOG_COLUMNS)
    for r in rows:
        writer.writerow([r["epoch"]] + [repr(float(r[c])) for c in EPOCH_LOG_COLUMNS[1:]])
    return buf.getvalue()


# -- inference and evaluation -----------------------------------------------------------
def predict(model: Module, x_prev: np.ndarray, x_curr: np.ndarray, stats: NormalizationStats,
            var_names: Sequence[str], dt_hours: float, batch_size: int = 16) -> np.ndarray:
    """One model step in physical units: ``[N, V, H, W]`` raw fields in and out."""
    model.eval()
    dtype = _param_dtype(model)
    curr, prev = model_inputs(x_prev, x_curr, dt_hours, stats, var_names)
    outs = []
    with no_grad():
        for s in range(0, len(curr), batch_size):
            out = model(curr[s:s + batch_size].astype(dtype), prev[s:s + batch_size].astype(dtype))
            outs.append(out.data.astype(np.float64))
    return stats.invert(np.concatenate(outs), var_names)


def rollout(model: Module | None, x_prev: np.ndarray, x_curr: np.ndarray, steps: int, stats: NormalizationStats,
            var_names: Sequence[str], dt_hours: float) -> list[np.ndarray]:
    """Autoregressive forecasts for leads 1..steps; ``model=None`` is persistence."""
    preds = []
    prev, curr = x_prev.astype(np.float64), x_curr.astype(np.float64)
    for _ in range(steps):
        nxt = curr.copy() if model is None else predict(model, prev, curr, stats, var_names, dt_hours)
        preds.append(nxt)
        prev, curr = curr, nxt
    return preds


def lead_steps_for(leads_hours: Sequence[float], dt_hours: float) -> list[int]:
    out = []
    for lead in leads_hours:
        k = lead / dt_hours
        if k < 1 or abs(k - round(k)) > 1e-9:
            raise ValueError(f"lead {lead} h is not a positive multiple of dt = {dt_hours} h")
        out.append(int(round(k)))
    return out


def evaluate(model: Module, data: ForecastData, leads_hours: Sequence[float], split: str = "test",
             label: str | None = None, include_persistence: bool = True) -> MetricsReport:
    """RMSE / ACC per variable and lead from autoregressive rollouts on ``split``.

    ACC that is undefined (zero anomaly energy) is reported as NaN and flagged
    on the report.
    """
    steps = lead_steps_for(leads_hours, data.dt_hours)
    seq = data.split(split)
    kmax = max(steps)
    n_starts = len(seq) - 1 - kmax
    if n_starts < 1:
        raise ValueError(f"{split} split of {len(seq)} samples too short for {kmax}-step rollout")
    fields = np.stack([s.fields for s in seq]).astype(np.float64)
    x_prev, x_curr = fields[:n_starts], fields[1:n_starts + 1]
    clim = fields.mean(axis=0)
    lw = latitude_weights(data.grid)
    label = label or getattr(getattr(model, "config", None), "variant", "model")
    predictors = [(label, model)] + ([("persistence", None)] if include_persistence else [])
    report = MetricsReport([])
    for name, m in predictors:
        preds = rollout(m, x_prev, x_curr, kmax, data.stats, data.var_names, data.dt_hours)
        for lead_h, k in zip(leads_hours, steps):
            truth = fields[1 + k:n_starts + 1 + k]
            rmse = rmse_metric(list(preds[k - 1]), list(truth), lw)
            acc = acc_metric(list(preds[k - 1]), list(truth), clim, lw, strict=False)
            report.acc_undefined |= bool(np.isnan(acc).any())
            for i, v in enumerate(data.var_names):
                report.rows.append(MetricRow(v, float(lead_h), float(rmse[i]), float(acc[i]), name))
    return report
