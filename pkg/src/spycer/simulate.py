"""Synthetic scene generator and forward diffusion-reaction integrator.

Produces ground-truth NSAT fields by integrating

    dTa/dt = K_eff * Lap(Ta) - (u, v) . grad(Ta) + alpha * (Ts - Ta)

with explicit Euler, a 5-point Laplacian, first-order upwind advection and
zero-flux boundaries. K enters dimensionless: K_eff = K * h^2 per day, so
K_eff * Lap reduces to K times the raw 4-neighbor difference per day. LST
forcing is held piecewise-constant between acquisition dates.

All synthetic constants below (class index means, LST class offsets, the
seasonal curve) are implementation choices for the benchmark, not physical
calibration.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, PlacementFailure, StabilityFailure
from .grids import (
    PATCH_MARGIN,
    GridMeta,
    Scene,
    Sensor,
    SensorNetwork,
    TimeStamp,
    VariableGrid,
    save_scene,
    save_sensors,
)

CLASS_NAMES = ("vegetation", "water", "built", "bare")

# Per-class (NDVI, NDWI, NDBI) means and LST offsets in degC.
CLASS_INDEX_MEANS = {
    "vegetation": (0.7, -0.3, -0.4),
    "water": (-0.1, 0.6, -0.5),
    "built": (0.1, -0.4, 0.5),
    "bare": (0.2, -0.2, 0.1),
}
CLASS_LST_OFFSET_C = {"vegetation": -2.0, "water": -4.0, "built": 4.0, "bare": 2.0}
INDEX_NOISE_STD = 0.05

SEASONAL_MEAN_C = 15.0
SEASONAL_AMP_C = 10.0
SEASONAL_PHASE_DAY = 80.0

MIN_DT_DAYS = 1e-6
BASE_YEAR = 2025


def seasonal_lst_c(day_of_year: float) -> float:
    """Smooth annual LST cycle peaking in early summer."""
    return SEASONAL_MEAN_C + SEASONAL_AMP_C * math.sin(
        2.0 * math.pi * (day_of_year - SEASONAL_PHASE_DAY) / 365.0
    )


def date_label_for(day_of_year: float, year: int = BASE_YEAR) -> str:
    """ISO date label for a (possibly fractional) 0-based day of year."""
    whole = int(day_of_year)
    iso = (datetime.date(year, 1, 1) + datetime.timedelta(days=whole)).isoformat()
    frac = day_of_year - whole
    if frac < 1e-9:
        return iso
    return f"{iso}+{frac:.6f}"


@dataclass(frozen=True)
class SimConfig:
    """Everything needed to reproduce one synthetic scene bit for bit."""

    grid: GridMeta
    n_dates: int = 12
    date_spacing_days: float = 15.0
    start_day_of_year: float = 94.0  # 2025-04-05
    K_true: float = 0.8              # dimensionless, wrapped as K * h^2 / day
    alpha_true: float = 0.5          # 1/day
    wind_u: float = 0.0              # m/day
    wind_v: float = 0.0
    noise_lst_std: float = 1.5       # degC
    noise_sensor_std: float = 0.3    # degC
    n_sensors: int = 33
    seed: int = 7
    # Fractions of the smooth field assigned to each land-cover class,
    # in CLASS_NAMES order. Not a paper quantity; exposed for testability.
    class_fractions: tuple = (0.40, 0.15, 0.25, 0.20)
    lst_spatial_amp_c: float = 3.0   # amplitude of the static heterogeneity field
    dt_days: float | None = None     # explicit sub-step; None = auto from stability

    def __post_init__(self):
        if self.n_dates < 1:
            raise DataError("n_dates must be >= 1")
        if self.date_spacing_days <= 0:
            raise DataError("date_spacing_days must be positive")
        if self.n_sensors < 5:
            raise DataError("n_sensors must be >= 5")
        if len(self.class_fractions) != len(CLASS_NAMES):
            raise DataError(f"class_fractions needs {len(CLASS_NAMES)} entries")
        if abs(sum(self.class_fractions) - 1.0) > 1e-9:
            raise DataError("class_fractions must sum to 1")
        if any(f < 0 for f in self.class_fractions):
            raise DataError("class_fractions must be non-negative")

    def stability_rate(self) -> float:
        """Coefficient c so that a sub-step dt is stable iff dt * c < 1."""
        h = self.grid.resolution_m
        return (
            4.0 * self.K_true
            + (abs(self.wind_u) + abs(self.wind_v)) / h
            + self.alpha_true
        )

    def timestamps(self) -> list[TimeStamp]:
        out = []
        for i in range(self.n_dates):
            day = self.start_day_of_year + i * self.date_spacing_days
            out.append(TimeStamp(day % 365.0, date_label_for(day)))
        return out

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"] = self.grid.as_dict()
        d["class_fractions"] = list(self.class_fractions)
        return d


@dataclass(frozen=True)
class SyntheticScene:
    """A scene with NSAT truth plus the sensors sampled from it."""

    scene: Scene
    sensors: SensorNetwork
    provenance: SimConfig
    # Recorded noise draw per (sensor_id, date_label); readings equal
    # truth at the sensor pixel plus this draw.
    sensor_noise: dict


def _stage_rng(cfg: SimConfig, stage: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stage])


def _cosine_field(rng: np.random.Generator, height: int, width: int,
                  n_modes: int = 6) -> np.ndarray:
    """Smooth random field as a sum of low-frequency cosine modes, ~unit scale."""
    rows = np.arange(height)[:, None] / height
    cols = np.arange(width)[None, :] / width
    field = np.zeros((height, width))
    for _ in range(n_modes):
        fy = rng.integers(1, 4)
        fx = rng.integers(1, 4)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amp = rng.uniform(0.5, 1.0)
        field += amp * np.cos(2.0 * math.pi * (fy * rows + fx * cols) + phase)
    return field / n_modes


def gen_landcover(cfg: SimConfig):
    """Land-cover classes and spectral index grids for one scene.

    Returns (class_grid, {index name: array}); class_grid holds indices
    into CLASS_NAMES. Index values are clamped to [-1, 1].
    """
    rng = _stage_rng(cfg, 0)
    h, w = cfg.grid.height, cfg.grid.width
    field = _cosine_field(rng, h, w)

    quantiles = np.cumsum(cfg.class_fractions)[:-1]
    thresholds = np.quantile(field, quantiles)
    class_grid = np.digitize(field, thresholds).astype(np.int8)

    index_grids = {}
    for idx, name in enumerate(("ndvi", "ndwi", "ndbi")):
        values = np.empty((h, w))
        for class_id, class_name in enumerate(CLASS_NAMES):
            values[class_grid == class_id] = CLASS_INDEX_MEANS[class_name][idx]
        values += rng.normal(0.0, INDEX_NOISE_STD, size=(h, w))
        index_grids[name] = np.clip(values, -1.0, 1.0)
    return class_grid, index_grids


def gen_lst_forcing(class_grid: np.ndarray, dates: list[TimeStamp],
                    cfg: SimConfig) -> dict:
    """Per-date LST grids: seasonal cycle + class offset + static field + noise."""
    rng = _stage_rng(cfg, 1)
    h, w = class_grid.shape
    offsets = np.empty((h, w))
    for class_id, class_name in enumerate(CLASS_NAMES):
        offsets[class_grid == class_id] = CLASS_LST_OFFSET_C[class_name]
    static = cfg.lst_spatial_amp_c * _cosine_field(rng, h, w)

    out = {}
    for ts in dates:
        lst = seasonal_lst_c(ts.day_of_year) + offsets + static
        if cfg.noise_lst_std > 0:
            lst = lst + rng.normal(0.0, cfg.noise_lst_std, size=(h, w))
        out[ts.date_label] = lst
    return out


def _laplacian_raw(t: np.ndarray) -> np.ndarray:
    """4-neighbor difference (N + S + E + W - 4C) with zero-flux boundaries."""
    padded = np.pad(t, 1, mode="edge")
    return (
        padded[:-2, 1:-1]
        + padded[2:, 1:-1]
        + padded[1:-1, :-2]
        + padded[1:-1, 2:]
        - 4.0 * t
    )


def _upwind_advection(t: np.ndarray, u: float, v: float, h: float) -> np.ndarray:
    """(u, v) . grad(T) with first-order upwind differencing.

    x grows with column index, y shrinks with row index.
    """
    padded = np.pad(t, 1, mode="edge")
    west = padded[1:-1, :-2]
    east = padded[1:-1, 2:]
    north = padded[:-2, 1:-1]   # larger y
    south = padded[2:, 1:-1]    # smaller y
    dtdx = (t - west) / h if u >= 0 else (east - t) / h
    dtdy = (t - south) / h if v >= 0 else (north - t) / h
    return u * dtdx + v * dtdy


def euler_step(ta: np.ndarray, ts: np.ndarray, cfg: SimConfig, dt: float) -> np.ndarray:
    """One explicit Euler sub-step of the forced diffusion-reaction system."""
    rate = cfg.K_true * _laplacian_raw(ta) + cfg.alpha_true * (ts - ta)
    if cfg.wind_u != 0.0 or cfg.wind_v != 0.0:
        rate = rate - _upwind_advection(ta, cfg.wind_u, cfg.wind_v, cfg.grid.resolution_m)
    return ta + dt * rate


def _stable_dt(cfg: SimConfig, dt_request: float) -> float:
    """Halve the requested sub-step until the explicit scheme is stable."""
    rate = cfg.stability_rate()
    dt = dt_request
    while dt * rate >= 1.0:
        dt *= 0.5
        if dt < MIN_DT_DAYS:
            raise StabilityFailure(
                f"sub-step underflowed below {MIN_DT_DAYS} day while seeking "
                f"stability (rate {rate:.3g}/day)"
            )
    return dt


def integrate_adr(lst_series: list[np.ndarray], cfg: SimConfig,
                  dt_days: float | None = None) -> list[np.ndarray]:
    """Integrate NSAT forward through the date sequence.

    Initializes Ta to the first LST grid, holds each LST grid constant until
    the next date, and returns one NSAT snapshot per date.
    """
    if not lst_series:
        raise DataError("integrate_adr needs at least one LST grid")
    request = dt_days if dt_days is not None else (cfg.dt_days or cfg.date_spacing_days)
    dt = _stable_dt(cfg, request)

    ta = lst_series[0].astype(np.float64).copy()
    snapshots = [ta.copy()]
    spacing = cfg.date_spacing_days
    for k in range(len(lst_series) - 1):
        forcing = lst_series[k].astype(np.float64)
        n_steps = max(1, int(math.ceil(spacing / dt - 1e-12)))
        dt_seg = spacing / n_steps
        for _ in range(n_steps):
            ta = euler_step(ta, forcing, cfg, dt_seg)
        snapshots.append(ta.copy())
    return snapshots


def sample_sensors(truth: dict, dates: list[TimeStamp], cfg: SimConfig):
    """Place sensors uniformly at margin-valid pixels, min 5 px apart.

    Returns (SensorNetwork, noise draws keyed by (sensor_id, date_label)).
    Readings are truth at the pixel plus Gaussian noise.
    """
    rng = _stage_rng(cfg, 2)
    meta = cfg.grid
    rows = np.arange(PATCH_MARGIN, meta.height - PATCH_MARGIN)
    cols = np.arange(PATCH_MARGIN, meta.width - PATCH_MARGIN)
    if rows.size * cols.size < cfg.n_sensors:
        raise PlacementFailure(
            f"{cfg.n_sensors} sensors cannot fit in a "
            f"{rows.size}x{cols.size} interior"
        )

    min_sep_sq = 5.0 ** 2
    placed: list[tuple[int, int]] = []
    rejections = 0
    max_rejections = 10 * cfg.n_sensors
    while len(placed) < cfg.n_sensors:
        r = int(rng.integers(rows[0], rows[-1] + 1))
        c = int(rng.integers(cols[0], cols[-1] + 1))
        ok = all((r - pr) ** 2 + (c - pc) ** 2 >= min_sep_sq for pr, pc in placed)
        if ok and (r, c) not in placed:
            placed.append((r, c))
        else:
            rejections += 1
            if rejections > max_rejections:
                raise PlacementFailure(
                    f"placement constraints unsatisfiable after "
                    f"{max_rejections} rejections ({len(placed)} of "
                    f"{cfg.n_sensors} placed)"
                )

    sensors = []
    noise_draws = {}
    for i, (r, c) in enumerate(placed):
        x, y = meta.pixel_center(r, c)
        readings = {}
        for ts in dates:
            value = float(truth[ts.date_label][r, c])
            draw = float(rng.normal(0.0, cfg.noise_sensor_std)) if cfg.noise_sensor_std > 0 else 0.0
            readings[ts.date_label] = value + draw
            noise_draws[(f"s{i + 1:03d}", ts.date_label)] = draw
        sensors.append(Sensor(f"s{i + 1:03d}", x, y, r, c, readings))
    return SensorNetwork(sensors), noise_draws


def simulate_scene(cfg: SimConfig) -> SyntheticScene:
    """Generate a full synthetic scene: land cover, LST, NSAT truth, sensors."""
    dates = cfg.timestamps()
    class_grid, index_grids = gen_landcover(cfg)
    lst_by_date = gen_lst_forcing(class_grid, dates, cfg)

    lst_series = [lst_by_date[ts.date_label] for ts in dates]
    truth_series = integrate_adr(lst_series, cfg)

    meta = cfg.grid
    lst_grids = {
        ts.date_label: VariableGrid.full(meta, lst_by_date[ts.date_label])
        for ts in dates
    }
    truth_grids = {
        ts.date_label: VariableGrid.full(meta, truth_series[i])
        for i, ts in enumerate(dates)
    }
    months = []
    for ts in dates:
        if ts.month_label not in months:
            months.append(ts.month_label)
    indices = {
        (name, month): VariableGrid.full(meta, index_grids[name])
        for name in index_grids
        for month in months
    }
    scene = Scene(meta, dates, lst_grids, indices, truth_grids)

    # Sensor readings come from the stored float32 truth so that
    # reading == truth grid value + recorded draw holds exactly.
    truth_f32 = {label: grid.values for label, grid in truth_grids.items()}
    sensors, noise_draws = sample_sensors(truth_f32, dates, cfg)
    return SyntheticScene(scene, sensors, cfg, noise_draws)


def save_synthetic(bundle: SyntheticScene, out_dir, force: bool = False) -> Path:
    """Write the scene bundle, sensors.csv, and the provenance dump."""
    out = save_scene(bundle.scene, out_dir, force=force)
    save_sensors(bundle.sensors, out / "sensors.csv")
    (out / "sim_provenance.json").write_text(
        json.dumps(bundle.provenance.as_dict(), indent=2, sort_keys=True) + "\n"
    )
    return out
