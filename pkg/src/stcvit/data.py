"""Gridded weather-like data: grids, synthetic generation, preprocessing and file IO."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

EARTH_RADIUS = 6.371e6
DEFAULT_VARIABLES = ("t2m", "u10", "v10", "z500")
REGIMES = ("solid_rotation", "advection_diffusion")

MAGIC = b"STCG"
FORMAT_VERSION = 1


class GridFormatError(ValueError):
    pass


class BadMagicError(GridFormatError):
    pass


class TruncatedFileError(GridFormatError):
    pass


class VersionMismatchError(GridFormatError):
    pass


def _uniform(values: np.ndarray) -> bool:
    steps = np.diff(values)
    return bool(np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9))


@dataclass(frozen=True, eq=False)
class LatLonGrid:
    lats: np.ndarray
    lons: np.ndarray

    def __post_init__(self):
        lats = np.asarray(self.lats, dtype=np.float64)
        lons = np.asarray(self.lons, dtype=np.float64)
        object.__setattr__(self, "lats", lats)
        object.__setattr__(self, "lons", lons)
        if lats.ndim != 1 or lons.ndim != 1 or len(lats) < 2 or len(lons) < 2:
            raise ValueError("grid needs at least 2 latitudes and 2 longitudes")
        if np.any(np.abs(lats) > 90):
            raise ValueError("latitudes must lie in [-90, 90]")
        if np.any(lons < 0) or np.any(lons >= 360):
            raise ValueError("longitudes must lie in [0, 360)")
        dlat = np.diff(lats)
        if not (np.all(dlat > 0) or np.all(dlat < 0)):
            raise ValueError("latitudes must be strictly monotonic")
        if not np.all(np.diff(lons) > 0):
            raise ValueError("longitudes must be strictly increasing")
        if not (_uniform(lats) and _uniform(lons)):
            raise ValueError("grid spacing must be uniform along each axis")

    @classmethod
    def regular(cls, height: int, width: int) -> "LatLonGrid":
        """Equiangular global grid of cell centres, north to south."""
        dlat = 180.0 / height
        lats = 90.0 - dlat / 2 - dlat * np.arange(height)
        lons = 360.0 / width * np.arange(width)
        return cls(lats, lons)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.lats), len(self.lons)

    @property
    def dlon(self) -> float:
        return float(self.lons[1] - self.lons[0])

    @property
    def is_global(self) -> bool:
        """True when the longitudes wrap around the full circle."""
        return bool(np.isclose(self.dlon * len(self.lons), 360.0))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LatLonGrid)
            and np.array_equal(self.lats, other.lats)
            and np.array_equal(self.lons, other.lons)
        )

    __hash__ = None


@dataclass
class GridSample:
    time: int
    fields: np.ndarray
    var_names: tuple[str, ...]
    grid: LatLonGrid
    dt_hours: float = 6.0

    def __post_init__(self):
        self.var_names = tuple(self.var_names)
        self.fields = np.asarray(self.fields)
        if self.fields.ndim != 3:
            raise ValueError(f"fields must be [V, H, W], got shape {self.fields.shape}")
        if len(self.var_names) != self.fields.shape[0]:
            raise ValueError(f"{len(self.var_names)} names for {self.fields.shape[0]} variables")
        if len(set(self.var_names)) != len(self.var_names):
            raise ValueError(f"duplicate variable names: {self.var_names}")
        if self.fields.shape[1:] != self.grid.shape:
            raise ValueError(f"fields {self.fields.shape[1:]} do not match grid {self.grid.shape}")
        if self.dt_hours <= 0:
            raise ValueError("dt_hours must be positive")
        if not np.all(np.isfinite(self.fields)):
            raise ValueError(f"sample at time {self.time} contains non-finite values")


@dataclass
class WindowedExample:
    x_prev: GridSample
    x_curr: GridSample
    target: GridSample
    lead_steps: int = 1

    def __post_init__(self):
        if self.lead_steps < 1:
            raise ValueError("lead_steps must be positive")
        if self.x_prev.time + 1 != self.x_curr.time:
            raise ValueError("x_prev and x_curr must be consecutive")
        if self.target.time != self.x_curr.time + self.lead_steps:
            raise ValueError("target time does not match lead_steps")
        for s in (self.x_curr, self.target):
            if s.grid != self.x_prev.grid or s.var_names != self.x_prev.var_names:
                raise ValueError("window members must share grid and variables")


# -- latitude geometry --------------------------------------------------------------
def latitude_weights(grid_or_lats) -> np.ndarray:
    """cos(lat) normalised to unit mean over the latitude axis."""
    lats = grid_or_lats.lats if isinstance(grid_or_lats, LatLonGrid) else np.asarray(grid_or_lats, float)
    c = np.cos(np.deg2rad(lats))
    return c / c.mean()


# -- synthetic data -----------------------------------------------------------------
def _smooth_pattern(rng: np.random.Generator, lat_rad: np.ndarray, lon_rad: np.ndarray) -> np.ndarray:
    n_terms = int(rng.integers(3, 9))
    out = np.zeros((len(lat_rad), len(lon_rad)))
    for _ in range(n_terms):
        m = int(rng.integers(1, 4))  # zonal wavenumber, keeps the field periodic
        n = int(rng.integers(0, 4))
        amp = rng.normal()
        phase_x, phase_y = rng.uniform(0, 2 * np.pi, size=2)
        out += amp * np.outer(np.cos(n * lat_rad + phase_y), np.cos(m * lon_rad + phase_x))
    std = out.std()
    return out / std if std > 0 else out


def _diffuse(f: np.ndarray, kappa: float, periodic: bool) -> np.ndarray:
    # 5-point Laplacian, periodic in longitude, zero-flux at the latitude edges
    up = np.concatenate([f[..., :1, :], f[..., :-1, :]], axis=-2)
    down = np.concatenate([f[..., 1:, :], f[..., -1:, :]], axis=-2)
    if periodic:
        left, right = np.roll(f, 1, axis=-1), np.roll(f, -1, axis=-1)
    else:
        left = np.concatenate([f[..., :1], f[..., :-1]], axis=-1)
        right = np.concatenate([f[..., 1:], f[..., -1:]], axis=-1)
    return f + kappa * (up + down + left + right - 4 * f)


def generate_synthetic(
    grid: LatLonGrid,
    n_steps: int,
    seed: int,
    regime: str = "solid_rotation",
    shift: int = 1,
    kappa: float = 0.1,
    dt_hours: float = 6.0,
) -> list[GridSample]:
    """Smooth fields rigidly rotated eastward by ``shift`` cells per step.

    ``u10`` carries the solid-body advecting wind plus a rotating perturbation,
    ``v10`` a rotating perturbation, ``t2m`` and ``z500`` are passive tracers.
    ``advection_diffusion`` additionally diffuses every field with factor
    ``kappa`` after each shift.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if n_steps < 3:
        raise ValueError("n_steps must be >= 3")
    rng = np.random.default_rng(seed)
    lat = np.deg2rad(grid.lats)
    lon = np.deg2rad(grid.lons)
    coslat = np.cos(lat)[:, None]
    omega = shift * np.deg2rad(grid.dlon) / (dt_hours * 3600.0)
    u_solid = omega * EARTH_RADIUS * coslat * np.ones((1, len(lon)))

    t2m = 273.0 + 25.0 * coslat + 6.0 * _smooth_pattern(rng, lat, lon)
    u10 = u_solid + 4.0 * _smooth_pattern(rng, lat, lon)
    v10 = 4.0 * _smooth_pattern(rng, lat, lon)
    z500 = 5500.0 + 150.0 * coslat + 40.0 * _smooth_pattern(rng, lat, lon)
    base = np.stack([t2m, u10, v10, z500])

    samples = []
    f = base
    for t in range(n_steps):
        if regime == "solid_rotation":
            f = np.roll(base, shift * t, axis=-1)
        elif t > 0:
            f = _diffuse(np.roll(f, shift, axis=-1), kappa, grid.is_global)
        samples.append(GridSample(t, f.astype(np.float32), DEFAULT_VARIABLES, grid, dt_hours))
    return samples


# -- preprocessing ------------------------------------------------------------------
def temporal_derivative(x_curr: GridSample, x_prev: GridSample) -> np.ndarray:
    """Per-pixel finite difference ``(x_curr - x_prev) / dt_hours``."""
    if x_curr.grid != x_prev.grid:
        raise ValueError("samples live on different grids")
    if x_curr.var_names != x_prev.var_names:
        raise ValueError(f"variable mismatch: {x_curr.var_names} vs {x_prev.var_names}")
    diff = x_curr.fields.astype(np.float64) - x_prev.fields.astype(np.float64)
    return diff / x_curr.dt_hours


def derivative_names(var_names: Sequence[str]) -> tuple[str, ...]:
    return tuple(f"d_{v}" for v in var_names)


@dataclass
class NormalizationStats:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("standard deviations must be positive")

    def _broadcast(self, x: np.ndarray, names: Sequence[str] | None):
        idx = [self.names.index(n) for n in names] if names is not None else slice(None)
        mean = self.mean[idx].reshape(-1, 1, 1)
        std = self.std[idx].reshape(-1, 1, 1)
        return mean, std

    def apply(self, x: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
        mean, std = self._broadcast(x, names)
        return (x - mean) / std

    def invert(self, x: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
        mean, std = self._broadcast(x, names)
        return x * std + mean

    def subset(self, names: Sequence[str]) -> "NormalizationStats":
        idx = [self.names.index(n) for n in names]
        return NormalizationStats(tuple(names), self.mean[idx], self.std[idx])

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(tuple(d["names"]), np.array(d["mean"]), np.array(d["std"]))


def fit_normalization(data, names: Sequence[str] | None = None) -> NormalizationStats:
    """Per-channel z-score statistics over samples and grid points.

    ``data`` is a sequence of :class:`GridSample` or an array ``[N, C, H, W]``
    (then ``names`` is required).
    """
    if len(data) and isinstance(data[0], GridSample):
        names = data[0].var_names
        arr = np.stack([s.fields for s in data])
    else:
        arr = np.asarray(data)
        if names is None:
            raise ValueError("names are required when fitting on raw arrays")
    if arr.ndim != 4 or arr.shape[0] < 2:
        raise ValueError("need at least 2 samples of shape [C, H, W]")
    arr = arr.astype(np.float64)
    mean = arr.mean(axis=(0, 2, 3))
    std = arr.std(axis=(0, 2, 3))
    bad = [n for n, s in zip(names, std) if not s > 0]
    if bad:
        raise ValueError(f"zero-variance channel(s): {', '.join(bad)}")
    return NormalizationStats(tuple(names), mean, std)


def make_windows(sequence: Sequence[GridSample], lead_steps: int = 1) -> list[WindowedExample]:
    if lead_steps < 1:
        raise ValueError("lead_steps must be positive")
    if len(sequence) < lead_steps + 2:
        raise ValueError(f"sequence of {len(sequence)} samples too short for lead {lead_steps}")
    return [
        WindowedExample(sequence[i], sequence[i + 1], sequence[i + 1 + lead_steps], lead_steps)
        for i in range(len(sequence) - 1 - lead_steps)
    ]


# -- grid file format ---------------------------------------------------------------
_HEADER = struct.Struct("<4sIIIIIf")


def write_grid(path, sequence: Sequence[GridSample], grid: LatLonGrid | None = None,
               var_names: Sequence[str] | None = None, dt_hours: float | None = None) -> int:
    """Write a sequence to the binary grid format; returns bytes written.

    ``grid``, ``var_names`` and ``dt_hours`` are only needed for an empty sequence.
    """
    if sequence:
        grid = sequence[0].grid
        var_names = sequence[0].var_names
        dt_hours = sequence[0].dt_hours
        for s in sequence:
            if s.grid != grid or s.var_names != tuple(var_names):
                raise ValueError("all samples must share grid and variables")
    if grid is None or var_names is None:
        raise ValueError("empty sequence needs explicit grid and var_names")
    dt_hours = 6.0 if dt_hours is None else dt_hours
    h, w = grid.shape
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(var_names), h, w, len(sequence), dt_hours)]
    for name in var_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(grid.lats.astype("<f8").tobytes())
    parts.append(grid.lons.astype("<f8").tobytes())
    for s in sequence:
        parts.append(np.ascontiguousarray(s.fields, dtype="<f4").tobytes())
    payload = b"".join(parts)
    Path(path).write_bytes(payload)
    return len(payload)


def read_grid(path) -> list[GridSample]:
    seq, _ = read_grid_with_meta(path)
    return seq


@dataclass
class GridFileMeta:
    grid: LatLonGrid
    var_names: tuple[str, ...]
    dt_hours: float
    n_steps: int = field(default=0)


def read_grid_with_meta(path) -> tuple[list[GridSample], GridFileMeta]:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a grid file")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, version, n_var, h, w, n_steps, dt_hours = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    off = _HEADER.size
    names = []
    for _ in range(n_var):
        if off + 4 > len(buf):
            raise TruncatedFileError(f"{path}: truncated variable names")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + n > len(buf):
            raise TruncatedFileError(f"{path}: truncated variable names")
        names.append(buf[off:off + n].decode("utf-8"))
        off += n
    need = off + 8 * (h + w) + 4 * n_var * h * w * n_steps
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(buf)}")
    lats = np.frombuffer(buf, "<f8", h, off).astype(np.float64)
    off += 8 * h
    lons = np.frombuffer(buf, "<f8", w, off).astype(np.float64)
    off += 8 * w
    grid = LatLonGrid(lats, lons)
    block = n_var * h * w
    fields = np.frombuffer(buf, "<f4", block * n_steps, off).astype(np.float32).reshape(n_steps, n_var, h, w)
    seq = [GridSample(t, fields[t].copy(), tuple(names), grid, float(dt_hours)) for t in range(n_steps)]
    return seq, GridFileMeta(grid, tuple(names), float(dt_hours), n_steps)
