"""Georeferenced grids, sensors, patches, and the on-disk scene bundle.

Conventions used throughout the package:

* Pixel (row, col) has its center at
  ``(origin_x + col * resolution_m, origin_y - row * resolution_m)``;
  row 0 is the northern edge.
* Patches are 7x7 pixels, so every usable sensor sits at least 3 pixels
  away from each grid border.
* A scene bundle on disk is a directory with ``manifest.json`` plus one
  raw binary file per variable and date: little-endian float32, row-major,
  no header. Non-finite values mark nodata.
* Sensors travel as CSV with header ``id,x_utm,y_utm,date,tair_c``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, MissingReading, MissingVariable, OutOfBounds

log = logging.getLogger(__name__)

PATCH_SIZE = 7
PATCH_MARGIN = 3
DAYS_PER_YEAR = 365.0

# Channel order of a patch tensor. LST and the spectral indices are
# z-scored by training statistics; offsets and time encodings use fixed
# schemes (see normalize_inputs).
CHANNEL_NAMES = ("lst", "x_off", "y_off", "sin_t", "cos_t", "ndvi", "ndwi", "ndbi")
CH_LST = 0
CH_XOFF = 1
CH_YOFF = 2
CH_SIN = 3
CH_COS = 4
CH_NDVI = 5
CH_NDWI = 6
CH_NDBI = 7
ZSCORED_CHANNELS = (CH_LST, CH_NDVI, CH_NDWI, CH_NDBI)
INDEX_NAMES = ("ndvi", "ndwi", "ndbi")

MIN_READING_C = -60.0
MAX_READING_C = 60.0


def _round_half_away(v: float) -> int:
    """Round to nearest integer, ties away from zero."""
    return int(math.floor(abs(v) + 0.5)) * (1 if v >= 0 else -1)


@dataclass(frozen=True)
class GridMeta:
    """Geometry of a regular UTM-aligned grid."""

    width: int
    height: int
    resolution_m: float = 10.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    crs_label: str = "UTM"

    def __post_init__(self):
        if self.width < PATCH_SIZE or self.height < PATCH_SIZE:
            raise DataError(
                f"grid must be at least {PATCH_SIZE}x{PATCH_SIZE}, "
                f"got {self.width}x{self.height}"
            )
        if self.resolution_m <= 0:
            raise DataError(f"resolution_m must be positive, got {self.resolution_m}")

    def pixel_center(self, row: int, col: int) -> tuple[float, float]:
        """UTM coordinates of the center of pixel (row, col)."""
        return (
            self.origin_x + col * self.resolution_m,
            self.origin_y - row * self.resolution_m,
        )

    def as_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "resolution_m": self.resolution_m,
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "crs_label": self.crs_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridMeta":
        return cls(**d)


def project_sensor(x_utm: float, y_utm: float, meta: GridMeta) -> tuple[int, int]:
    """Map UTM coordinates to the nearest pixel center.

    Raises OutOfBounds when the point falls outside the grid or within the
    3-pixel border margin; callers ingest sensors by excluding such points.
    """
    col = _round_half_away((x_utm - meta.origin_x) / meta.resolution_m)
    row = _round_half_away((meta.origin_y - y_utm) / meta.resolution_m)
    if not (0 <= row < meta.height and 0 <= col < meta.width):
        raise OutOfBounds(f"({x_utm}, {y_utm}) maps to pixel ({row}, {col}) outside grid")
    if not (
        PATCH_MARGIN <= row < meta.height - PATCH_MARGIN
        and PATCH_MARGIN <= col < meta.width - PATCH_MARGIN
    ):
        raise OutOfBounds(
            f"({x_utm}, {y_utm}) maps to pixel ({row}, {col}) inside the "
            f"{PATCH_MARGIN}-pixel border margin"
        )
    return row, col


def unproject(row: int, col: int, meta: GridMeta) -> tuple[float, float]:
    """Inverse of project_sensor up to half a pixel: pixel-center UTM coords."""
    return meta.pixel_center(row, col)


def encode_time(day_of_year: float) -> tuple[float, float]:
    """Seasonal encoding of a day of year: point on the unit circle."""
    angle = 2.0 * math.pi * day_of_year / DAYS_PER_YEAR
    return math.sin(angle), math.cos(angle)


@dataclass(frozen=True)
class TimeStamp:
    day_of_year: float
    date_label: str

    def __post_init__(self):
        if not (0.0 <= self.day_of_year < DAYS_PER_YEAR):
            raise DataError(
                f"day_of_year must lie in [0, {DAYS_PER_YEAR}), got {self.day_of_year}"
            )

    @property
    def month_label(self) -> str:
        """Calendar month bucket, the YYYY-MM prefix of the date label."""
        return self.date_label[:7]

    def encode(self) -> tuple[float, float]:
        return encode_time(self.day_of_year)


@dataclass(frozen=True)
class VariableGrid:
    """One gridded variable: values plus a nodata mask."""

    meta: GridMeta
    values: np.ndarray
    nodata_mask: np.ndarray

    def __post_init__(self):
        expected = (self.meta.height, self.meta.width)
        if self.values.shape != expected or self.nodata_mask.shape != expected:
            raise DataError(
                f"grid arrays must have shape {expected}, got values "
                f"{self.values.shape} and mask {self.nodata_mask.shape}"
            )
        valid = self.values[~self.nodata_mask]
        if valid.size and not np.all(np.isfinite(valid)):
            raise DataError("grid holds non-finite values outside the nodata mask")

    @classmethod
    def full(cls, meta: GridMeta, values: np.ndarray) -> "VariableGrid":
        """Grid with no missing data."""
        arr = np.asarray(values, dtype=np.float32)
        return cls(meta, arr, np.zeros(arr.shape, dtype=bool))

    @classmethod
    def from_raw(cls, meta: GridMeta, values: np.ndarray) -> "VariableGrid":
        """Grid where non-finite entries become nodata."""
        arr = np.asarray(values, dtype=np.float32)
        mask = ~np.isfinite(arr)
        arr = np.where(mask, np.float32(np.nan), arr)
        return cls(meta, arr, mask)


@dataclass(frozen=True)
class Sensor:
    """A point sensor projected onto the grid, with per-date NSAT readings."""

    id: str
    x_utm: float
    y_utm: float
    pixel_row: int
    pixel_col: int
    readings: dict

    def __post_init__(self):
        for date, value in self.readings.items():
            if not (MIN_READING_C <= value <= MAX_READING_C):
                raise DataError(
                    f"sensor {self.id} reading {value} degC at {date} outside "
                    f"[{MIN_READING_C}, {MAX_READING_C}]"
                )

    @classmethod
    def place(cls, sensor_id: str, x_utm: float, y_utm: float, meta: GridMeta,
              readings: dict) -> "Sensor":
        row, col = project_sensor(x_utm, y_utm, meta)
        return cls(sensor_id, x_utm, y_utm, row, col, dict(readings))


class SensorNetwork:
    """Ordered collection of sensors with id lookup."""

    def __init__(self, sensors: list[Sensor]):
        self.sensors = list(sensors)
        self._by_id = {s.id: s for s in self.sensors}
        if len(self._by_id) != len(self.sensors):
            raise DataError("duplicate sensor ids in network")

    def __len__(self):
        return len(self.sensors)

    def __iter__(self):
        return iter(self.sensors)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.sensors]

    def get(self, sensor_id: str) -> Sensor:
        try:
            return self._by_id[sensor_id]
        except KeyError:
            raise DataError(f"unknown sensor id {sensor_id!r}") from None

    def subset(self, ids) -> "SensorNetwork":
        return SensorNetwork([self.get(i) for i in ids])


class Scene:
    """A georeferenced stack of gridded variables over a list of dates.

    lst and nsat_truth are keyed by date label, the monthly spectral
    indices by (index name, month label).
    """

    def __init__(self, meta: GridMeta, dates: list[TimeStamp],
                 lst: dict, indices: dict, nsat_truth: dict | None = None):
        self.meta = meta
        self.dates = sorted(dates, key=lambda d: d.date_label)
        self.lst = dict(lst)
        self.indices = dict(indices)
        self.nsat_truth = dict(nsat_truth or {})
        self._dates_by_label = {d.date_label: d for d in self.dates}

    @property
    def date_labels(self) -> list[str]:
        return [d.date_label for d in self.dates]

    @property
    def month_labels(self) -> list[str]:
        seen = []
        for d in self.dates:
            if d.month_label not in seen:
                seen.append(d.month_label)
        return seen

    def timestamp(self, date_label: str) -> TimeStamp:
        try:
            return self._dates_by_label[date_label]
        except KeyError:
            raise MissingVariable(f"scene has no date {date_label!r}") from None

    def lst_at(self, date_label: str) -> VariableGrid:
        try:
            return self.lst[date_label]
        except KeyError:
            raise MissingVariable(f"no LST grid for date {date_label!r}") from None

    def index_at(self, name: str, month_label: str) -> VariableGrid:
        try:
            return self.indices[(name, month_label)]
        except KeyError:
            raise MissingVariable(
                f"no {name} grid for month {month_label!r}"
            ) from None

    def truth_at(self, date_label: str) -> VariableGrid:
        try:
            return self.nsat_truth[date_label]
        except KeyError:
            raise MissingVariable(
                f"no NSAT truth grid for date {date_label!r}"
            ) from None

    def has_truth(self) -> bool:
        return bool(self.nsat_truth)


@dataclass(frozen=True)
class PatchSample:
    """A 7x7 multi-channel window centered on a sensor pixel.

    channels holds the raw (unnormalized) 8x7x7 stack in CHANNEL_NAMES
    order; lst_patch_raw keeps the LST window in degC for the physics
    residual regardless of input normalization.
    """

    channels: np.ndarray
    target_nsat: float
    timestamp: TimeStamp
    lst_patch_raw: np.ndarray
    sensor_id: str = ""
    center: tuple = (PATCH_MARGIN, PATCH_MARGIN)


def _offset_channels() -> tuple[np.ndarray, np.ndarray]:
    """x_off/y_off planes: pixel offset from the patch center divided by 3."""
    off = (np.arange(PATCH_SIZE, dtype=np.float64) - PATCH_MARGIN) / PATCH_MARGIN
    x_off = np.tile(off, (PATCH_SIZE, 1))
    y_off = x_off.T.copy()
    return x_off, y_off


def patch_has_nodata(scene: Scene, sensor: Sensor, date_label: str) -> bool:
    """True when the 7x7 window overlaps any nodata pixel of any input grid."""
    r, c = sensor.pixel_row, sensor.pixel_col
    sl = (slice(r - PATCH_MARGIN, r + PATCH_MARGIN + 1),
          slice(c - PATCH_MARGIN, c + PATCH_MARGIN + 1))
    month = scene.timestamp(date_label).month_label
    grids = [scene.lst_at(date_label)]
    grids += [scene.index_at(name, month) for name in INDEX_NAMES]
    return any(bool(g.nodata_mask[sl].any()) for g in grids)


def extract_patch(scene: Scene, sensor: Sensor, date_label: str) -> PatchSample:
    """Cut the 8-channel 7x7 input window for one sensor and date.

    Pure function of its inputs; raises MissingReading / MissingVariable
    when the sensor or the scene lacks the date.
    """
    if date_label not in sensor.readings:
        raise MissingReading(f"sensor {sensor.id} has no reading at {date_label}")
    ts = scene.timestamp(date_label)
    lst = scene.lst_at(date_label)
    month = ts.month_label
    index_grids = [scene.index_at(name, month) for name in INDEX_NAMES]

    r, c = sensor.pixel_row, sensor.pixel_col
    sl = (slice(r - PATCH_MARGIN, r + PATCH_MARGIN + 1),
          slice(c - PATCH_MARGIN, c + PATCH_MARGIN + 1))
    lst_raw = lst.values[sl].astype(np.float64)

    channels = np.zeros((len(CHANNEL_NAMES), PATCH_SIZE, PATCH_SIZE), dtype=np.float64)
    channels[CH_LST] = lst_raw
    x_off, y_off = _offset_channels()
    channels[CH_XOFF] = x_off
    channels[CH_YOFF] = y_off
    sin_t, cos_t = ts.encode()
    channels[CH_SIN] = sin_t
    channels[CH_COS] = cos_t
    for ch, grid in zip((CH_NDVI, CH_NDWI, CH_NDBI), index_grids):
        channels[ch] = grid.values[sl].astype(np.float64)

    return PatchSample(
        channels=channels,
        target_nsat=float(sensor.readings[date_label]),
        timestamp=ts,
        lst_patch_raw=lst_raw,
        sensor_id=sensor.id,
    )


@dataclass(frozen=True)
class ChannelStats:
    """Normalization statistics computed from training samples only."""

    mean: np.ndarray          # per channel, zeros for non-z-scored channels
    std: np.ndarray           # per channel, ones for non-z-scored channels
    target_mean: float
    target_std: float

    STD_FLOOR = 1e-6

    @classmethod
    def from_samples(cls, samples: list[PatchSample]) -> "ChannelStats":
        if not samples:
            raise DataError("cannot compute channel stats from zero samples")
        stack = np.stack([s.channels for s in samples])  # (N, 8, 7, 7)
        mean = np.zeros(len(CHANNEL_NAMES))
        std = np.ones(len(CHANNEL_NAMES))
        for ch in ZSCORED_CHANNELS:
            mean[ch] = stack[:, ch].mean()
            std[ch] = max(stack[:, ch].std(), cls.STD_FLOOR)
        targets = np.array([s.target_nsat for s in samples])
        return cls(
            mean=mean,
            std=std,
            target_mean=float(targets.mean()),
            target_std=float(max(targets.std(), cls.STD_FLOOR)),
        )


def normalize_inputs(patch: PatchSample, stats: ChannelStats) -> PatchSample:
    """Z-score the LST and index channels, fix offset channels, keep time as is."""
    channels = patch.channels.copy()
    for ch in ZSCORED_CHANNELS:
        channels[ch] = (channels[ch] - stats.mean[ch]) / stats.std[ch]
    x_off, y_off = _offset_channels()
    channels[CH_XOFF] = x_off
    channels[CH_YOFF] = y_off
    return replace(patch, channels=channels)


# ---------------------------------------------------------------------------
# Scene bundle on disk
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
FORMAT_NAME = "spycer-scene"
FORMAT_VERSION = 1


def _grid_filename(kind: str, key: str) -> str:
    return f"{kind}_{key}.f32"


def _write_f32(path: Path, grid: VariableGrid) -> None:
    values = grid.values.astype("<f4")
    if grid.nodata_mask.any():
        values = values.copy()
        values[grid.nodata_mask] = np.float32(np.nan)
    path.write_bytes(values.tobytes())


def _read_f32(path: Path, meta: GridMeta) -> VariableGrid:
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = meta.height * meta.width
    if raw.size != expected:
        raise DataError(
            f"{path.name}: expected {expected} float32 values, found {raw.size}"
        )
    return VariableGrid.from_raw(meta, raw.reshape(meta.height, meta.width))


def manifest_dict(scene: Scene) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "grid": scene.meta.as_dict(),
        "dates": [
            {"label": d.date_label, "day_of_year": d.day_of_year} for d in scene.dates
        ],
        "months": scene.month_labels,
        "variables": {
            "lst": sorted(scene.lst),
            "nsat_truth": sorted(scene.nsat_truth),
            "indices": {
                name: sorted(m for (n, m) in scene.indices if n == name)
                for name in INDEX_NAMES
            },
        },
    }


def save_scene(scene: Scene, out_dir, force: bool = False) -> Path:
    """Write a scene bundle. Refuses to reuse a non-empty directory unless forced."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST_NAME).write_text(
        json.dumps(manifest_dict(scene), indent=2, sort_keys=True) + "\n"
    )
    for label, grid in scene.lst.items():
        _write_f32(out / _grid_filename("lst", label), grid)
    for label, grid in scene.nsat_truth.items():
        _write_f32(out / _grid_filename("nsat_truth", label), grid)
    for (name, month), grid in scene.indices.items():
        _write_f32(out / _grid_filename(name, month), grid)
    return out


def load_scene(scene_dir) -> Scene:
    src = Path(scene_dir)
    manifest_path = src / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"{src} is not a scene bundle: missing {MANIFEST_NAME}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_NAME:
        raise DataError(f"{manifest_path}: unrecognized format {manifest.get('format')!r}")
    meta = GridMeta.from_dict(manifest["grid"])
    dates = [TimeStamp(d["day_of_year"], d["label"]) for d in manifest["dates"]]
    variables = manifest["variables"]
    lst = {
        label: _read_f32(src / _grid_filename("lst", label), meta)
        for label in variables["lst"]
    }
    truth = {
        label: _read_f32(src / _grid_filename("nsat_truth", label), meta)
        for label in variables.get("nsat_truth", [])
    }
    indices = {}
    for name in INDEX_NAMES:
        for month in variables["indices"].get(name, []):
            indices[(name, month)] = _read_f32(src / _grid_filename(name, month), meta)
    return Scene(meta, dates, lst, indices, truth)


# ---------------------------------------------------------------------------
# Sensor CSV
# ---------------------------------------------------------------------------

SENSOR_CSV_HEADER = ["id", "x_utm", "y_utm", "date", "tair_c"]


def save_sensors(network: SensorNetwork, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SENSOR_CSV_HEADER)
        for sensor in network:
            for date in sorted(sensor.readings):
                writer.writerow(
                    [
                        sensor.id,
                        repr(sensor.x_utm),
                        repr(sensor.y_utm),
                        date,
                        repr(sensor.readings[date]),
                    ]
                )


def load_sensors(path, meta: GridMeta) -> SensorNetwork:
    """Read the sensor CSV and project onto the grid.

    Sensors that fall outside the grid or violate the border margin are
    excluded (with a warning), per the ingestion contract.
    """
    rows: dict[str, dict] = {}
    coords: dict[str, tuple[float, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SENSOR_CSV_HEADER:
            raise DataError(
                f"{path}: expected header {','.join(SENSOR_CSV_HEADER)}, "
                f"got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            sensor_id, x_s, y_s, date, value_s = row
            try:
                x, y, value = float(x_s), float(y_s), float(value_s)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if sensor_id in coords and coords[sensor_id] != (x, y):
                raise DataError(
                    f"{path}:{lineno}: sensor {sensor_id} re-appears with "
                    "different coordinates"
                )
            coords[sensor_id] = (x, y)
            rows.setdefault(sensor_id, {})[date] = value

    sensors = []
    for sensor_id in rows:
        x, y = coords[sensor_id]
        try:
            sensors.append(Sensor.place(sensor_id, x, y, meta, rows[sensor_id]))
        except OutOfBounds as exc:
            log.warning("excluding sensor %s: %s", sensor_id, exc)
    if not sensors:
        raise DataError(f"{path}: no sensors inside the usable grid area")
    return SensorNetwork(sensors)
