"""Latitude-weighted loss with soft physics penalties, and RMSE / ACC metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .data import EARTH_RADIUS, LatLonGrid, NormalizationStats, latitude_weights
from .tensor import Tensor

GRAVITY = 9.81


class MissingChannelError(KeyError):
    pass


class UndefinedACCError(ZeroDivisionError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.3  # kinetic
    beta: float = 0.3  # potential
    gamma: float = 0.8  # thermodynamic

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


@dataclass
class ChannelBindings:
    var_names: tuple[str, ...]
    u: str = "u10"
    v: str = "v10"
    T: str = "t2m"
    z: str = "z500"
    g: float = GRAVITY

    def index(self, role: str) -> int:
        name = getattr(self, role)
        try:
            return tuple(self.var_names).index(name)
        except ValueError:
            raise MissingChannelError(f"channel {name!r} for role {role!r} not in {self.var_names}") from None


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _channel(x, idx: int):
    return x[..., idx, :, :]


def lat_weighted_mse(pred, truth, weights) -> Tensor:
    """Mean over all elements of ``L(lat) * (pred - truth)**2``."""
    pred, truth = _t(pred), _t(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    w = np.asarray(weights, dtype=pred.dtype).reshape(-1, 1)
    if w.shape[0] != pred.shape[-2]:
        raise ValueError(f"{w.shape[0]} latitude weights for {pred.shape[-2]} rows")
    diff = pred - truth
    return (diff * diff * w).mean()


def kinetic_loss(pred, truth, bindings: ChannelBindings) -> Tensor:
    pred, truth = _t(pred), _t(truth)
    iu, iv = bindings.index("u"), bindings.index("v")

    def ke(x):
        u, v = _channel(x, iu), _channel(x, iv)
        return (u * u + v * v).scale(0.5)

    return (ke(pred) - ke(truth)).abs().mean()


def potential_loss(pred, truth, bindings: ChannelBindings) -> Tensor:
    pred, truth = _t(pred), _t(truth)
    iz = bindings.index("z")
    return (_channel(pred, iz) - _channel(truth, iz)).abs().mean().scale(bindings.g)


def _stencil(n: int, periodic: bool) -> tuple[np.ndarray, np.ndarray]:
    # neighbour indices for central differences, one-sided at open edges
    j = np.arange(n)
    if periodic:
        return (j + 1) % n, (j - 1) % n
    return np.minimum(j + 1, n - 1), np.maximum(j - 1, 0)


@dataclass
class _SpatialOperators:
    x_plus: np.ndarray
    x_minus: np.ndarray
    x_coef: np.ndarray  # [H, W] 1 / metres between the x stencil points
    y_plus: np.ndarray
    y_minus: np.ndarray
    y_coef: np.ndarray  # [H, 1]


_OPS_CACHE: dict = {}


def spatial_operators(grid: LatLonGrid) -> _SpatialOperators:
    key = (grid.lats.tobytes(), grid.lons.tobytes())
    ops = _OPS_CACHE.get(key)
    if ops is None:
        h, w = grid.shape
        lat = np.deg2rad(grid.lats)
        dx_m = EARTH_RADIUS * np.cos(lat) * np.deg2rad(grid.dlon)
        xp, xm = _stencil(w, grid.is_global)
        yp, ym = _stencil(h, False)
        y = EARTH_RADIUS * lat
        ops = _SpatialOperators(
            xp, xm, 1.0 / (dx_m[:, None] * (xp - xm + w * (xp < xm))[None, :]),
            yp, ym, (1.0 / (y[yp] - y[ym]))[:, None],
        )
        _OPS_CACHE[key] = ops
    return ops


def spatial_gradients(field, grid: LatLonGrid) -> tuple[Tensor, Tensor]:
    """Central-difference ``(df/dx, df/dy)`` in units per metre.

    Longitude wraps periodically on global grids; rows and non-global columns
    fall back to one-sided differences at the edges.
    """
    f = _t(field)
    ops = spatial_operators(grid)
    dt = f.dtype
    dfdx = (f[..., ops.x_plus] - f[..., ops.x_minus]) * ops.x_coef.astype(dt)
    dfdy = (f[..., ops.y_plus, :] - f[..., ops.y_minus, :]) * ops.y_coef.astype(dt)
    return dfdx, dfdy


def thermo_loss(pred_T, input_T, pred_u, pred_v, grid: LatLonGrid, dt: float) -> Tensor:
    """Grid mean of ``|dT/dt + u dT/dx + v dT/dy|``; ``dt`` in seconds."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    pred_T, pred_u, pred_v = _t(pred_T), _t(pred_u), _t(pred_v)
    dTdt = (pred_T - input_T).scale(1.0 / dt)
    dTdx, dTdy = spatial_gradients(pred_T, grid)
    return (dTdt + pred_u * dTdx + pred_v * dTdy).abs().mean()


@dataclass
class EnergyScales:
    """Divisors turning the kinetic and potential penalties into relative errors."""

    kinetic: float = 1.0
    potential: float = 1.0

    @classmethod
    def from_samples(cls, samples, bindings: ChannelBindings) -> "EnergyScales":
        """Mean specific kinetic energy and mean ``g * z`` over ``samples``."""
        if not samples:
            return cls()
        f = np.stack([s.fields for s in samples]).astype(np.float64)
        try:
            u, v = f[:, bindings.index("u")], f[:, bindings.index("v")]
            ke = float((0.5 * (u * u + v * v)).mean())
        except MissingChannelError:
            ke = 1.0
        try:
            pe = float(np.abs(bindings.g * f[:, bindings.index("z")]).mean())
        except MissingChannelError:
            pe = 1.0
        return cls(ke if ke > 0 else 1.0, pe if pe > 0 else 1.0)


@dataclass
class LossBreakdown:
    total: float
    lat_mse: float
    kinetic: float
    potential: float
    thermo: float

    def as_dict(self) -> dict:
        return asdict(self)


def combined_loss(
    pred,
    truth,
    inputs,
    weights: LossWeights,
    bindings: ChannelBindings,
    grid: LatLonGrid,
    dt_seconds: float,
    stats: NormalizationStats | None = None,
    lat_weights: np.ndarray | None = None,
    scales: EnergyScales | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Latitude-weighted MSE plus weighted kinetic, potential and thermo penalties.

    ``pred``/``truth``/``inputs`` are ``[..., V, H, W]``.  With ``stats`` they are
    taken to be normalised: the MSE is computed on them directly and the physics
    terms on the de-normalised fields.  ``inputs`` is the current state that
    the thermodynamic tendency is measured from.  ``scales`` divides the
    kinetic and potential terms (the breakdown reports the divided values).
    """
    pred = _t(pred)
    lw = latitude_weights(grid) if lat_weights is None else lat_weights
    mse = lat_weighted_mse(pred, truth, lw)
    if stats is not None:
        names = bindings.var_names
        mean = stats.subset(names).mean.reshape(-1, 1, 1).astype(pred.dtype)
        std = stats.subset(names).std.reshape(-1, 1, 1).astype(pred.dtype)
        pred_p = pred * std + mean
        truth_p = np.asarray(truth.data if isinstance(truth, Tensor) else truth) * std + mean
        inputs_p = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs) * std + mean
    else:
        pred_p = pred
        truth_p = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
        inputs_p = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs)

    scales = scales or EnergyScales()
    total = mse
    parts = {"kinetic": 0.0, "potential": 0.0, "thermo": 0.0}
    if weights.alpha:
        k = kinetic_loss(pred_p, truth_p, bindings).scale(1.0 / scales.kinetic)
        total = total + k.scale(weights.alpha)
        parts["kinetic"] = float(k.data)
    if weights.beta:
        p = potential_loss(pred_p, truth_p, bindings).scale(1.0 / scales.potential)
        total = total + p.scale(weights.beta)
        parts["potential"] = float(p.data)
    if weights.gamma:
        iT, iu, iv = bindings.index("T"), bindings.index("u"), bindings.index("v")
        th = thermo_loss(
            _channel(pred_p, iT), _channel(inputs_p, iT), _channel(pred_p, iu), _channel(pred_p, iv), grid, dt_seconds
        )
        total = total + th.scale(weights.gamma)
        parts["thermo"] = float(th.data)
    return total, LossBreakdown(float(total.data), float(mse.data), **parts)


# -- evaluation metrics -----------------------------------------------------------------
def _stack(samples) -> np.ndarray:
    arr = np.asarray([np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64) for s in samples])
    if arr.ndim != 4:
        raise ValueError(f"expected a list of [V, H, W] fields, got array of shape {arr.shape}")
    return arr


def rmse_metric(preds: Sequence, truths: Sequence, lat_weights) -> np.ndarray:
    """Per-variable mean over samples of the latitude-weighted RMSE."""
    if len(preds) == 0:
        raise ValueError("rmse_metric needs at least one sample")
    p, t = _stack(preds), _stack(truths)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    w = np.asarray(lat_weights, dtype=np.float64).reshape(1, 1, -1, 1)
    per_sample = np.sqrt((w * (p - t) ** 2).mean(axis=(2, 3)))
    return per_sample.mean(axis=0)


def acc_metric(preds: Sequence, truths: Sequence, climatology, lat_weights, strict: bool = True) -> np.ndarray:
    """Per-variable latitude-weighted anomaly correlation.

    The weights enter both numerator and denominator.  When either anomaly
    field of a variable has zero energy, raises :class:`UndefinedACCError`
    or, with ``strict=False``, returns NaN for that variable.
    """
    if len(preds) == 0:
        raise ValueError("acc_metric needs at least one sample")
    p, t = _stack(preds), _stack(truths)
    c = np.asarray(climatology, dtype=np.float64)
    w = np.asarray(lat_weights, dtype=np.float64).reshape(1, 1, -1, 1)
    pa, ta = p - c, t - c
    num = (w * pa * ta).sum(axis=(0, 2, 3))
    pp = (w * pa * pa).sum(axis=(0, 2, 3))
    tt = (w * ta * ta).sum(axis=(0, 2, 3))
    bad = (pp == 0) | (tt == 0)
    if strict and bad.any():
        raise UndefinedACCError("anomaly variance is zero; ACC undefined")
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = num / np.sqrt(pp * tt)
    acc[bad] = np.nan
    return acc


@dataclass
class MetricRow:
    variable: str
    lead_hours: float
    rmse: float
    acc: float
    variant: str | None = None


@dataclass
class MetricsReport:
    rows: list[MetricRow]
    acc_undefined: bool = False

    def to_csv(self, include_variant: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = ["variable", "lead_hours", "rmse", "acc"]
        writer.writerow((["variant"] if include_variant else []) + cols)
        for r in self.rows:
            vals = [r.variable, _fmt(r.lead_hours), repr(float(r.rmse)), repr(float(r.acc))]
            writer.writerow(([r.variant or ""] if include_variant else []) + vals)
        return buf.getvalue()

    def select(self, variant: str | None = None, lead_hours: float | None = None) -> list[MetricRow]:
        return [
            r for r in self.rows
            if (variant is None or r.variant == variant) and (lead_hours is None or r.lead_hours == lead_hours)
        ]


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def breakdown_json(epochs: list[dict]) -> str:
    return json.dumps(epochs, indent=2, sort_keys=True)
