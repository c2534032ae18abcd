"""Monte Carlo cross-validation harness, metrics, and exportable artifacts.

Folds are independent 80/20 splits of the sensor ids, reproducible from
the master seed alone. Each fold trains on all dates of its training
sensors and predicts every (test sensor, date) pair; metrics aggregate
per calendar month and overall, as mean and standard deviation over
folds. Fold work can run in worker processes; aggregation sorts by fold
index so the result is identical for any worker count.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import baselines as bl
from .errors import DataError, EmptyInput, InsufficientSensors
from .grids import (
    PATCH_MARGIN,
    CH_LST,
    CH_NDBI,
    CH_NDVI,
    CH_NDWI,
    CH_SIN,
    CH_COS,
    CH_XOFF,
    CH_YOFF,
    ChannelStats,
    PATCH_SIZE,
    Scene,
    SensorNetwork,
    VariableGrid,
    extract_patch,
    _offset_channels,
)
from .network import AttentionModule
from .physics import PhysicsConfig, adr_residual_batch, forward_with_time_derivative
from .training import (
    ABLATION_FULL,
    ABLATION_NO_GAUSSIAN,
    ABLATION_NO_NEIGHBOR,
    ModelState,
    TrainConfig,
    collect_samples,
    predict_center,
    train_patches,
)

log = logging.getLogger(__name__)

SPYCER_METHODS = {
    "spycer": ABLATION_FULL,
    "spycer_cfg1": ABLATION_NO_NEIGHBOR,
    "spycer_cfg2": ABLATION_NO_GAUSSIAN,
}
BASELINE_METHODS = ("lr", "rf", "gb", "mlp")
DIAGNOSTIC_METHODS = ("oracle", "constant")
ALL_METHODS = tuple(SPYCER_METHODS) + BASELINE_METHODS + DIAGNOSTIC_METHODS

DEFAULT_EVAL_EPOCHS = 120  # desk-scale benchmark; `spycer train` keeps 2000


@dataclass(frozen=True)
class FoldPlan:
    master_seed: int
    folds: tuple  # ((train_ids, test_ids), ...)

    @property
    def n_folds(self) -> int:
        return len(self.folds)


def make_folds(sensor_ids, n_folds: int, seed: int) -> FoldPlan:
    """Independent uniform 80/20 splits; test count is ceil(0.2 N)."""
    ids = list(sensor_ids)
    n = len(ids)
    if n < 5:
        raise InsufficientSensors(f"fold plan needs >= 5 sensors, got {n}")
    n_test = math.ceil(0.2 * n)
    folds = []
    for fold in range(n_folds):
        rng = np.random.default_rng([seed, fold])
        test_idx = set(rng.choice(n, size=n_test, replace=False).tolist())
        test = tuple(ids[i] for i in sorted(test_idx))
        train = tuple(ids[i] for i in range(n) if i not in test_idx)
        folds.append((train, test))
    return FoldPlan(seed, tuple(folds))


def rmse(preds, truths) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.size == 0:
        raise EmptyInput("rmse of empty vectors")
    if p.shape != t.shape:
        raise DataError(f"rmse length mismatch: {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(preds, truths) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.size == 0:
        raise EmptyInput("mae of empty vectors")
    if p.shape != t.shape:
        raise DataError(f"mae length mismatch: {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


# ---------------------------------------------------------------------------
# per-fold execution
# ---------------------------------------------------------------------------


def _test_pairs(scene: Scene, sensors: SensorNetwork, test_ids):
    pairs = []
    for sid in test_ids:
        sensor = sensors.get(sid)
        for label in scene.date_labels:
            if label in sensor.readings:
                pairs.append((sid, label))
    return pairs


def run_fold(scene: Scene, sensors: SensorNetwork, method: str,
             train_ids, test_ids, seed: int,
             phys: PhysicsConfig, train_cfg: TrainConfig) -> list:
    """Train one method on the train sensors and predict the test pairs.

    Returns (sensor_id, date_label, prediction, truth) records, where
    truth is the held-out sensor reading.
    """
    train_net = sensors.subset(train_ids)
    pairs = _test_pairs(scene, sensors, test_ids)
    truths = {
        (sid, label): sensors.get(sid).readings[label] for sid, label in pairs
    }

    if method == "oracle":
        preds = {pair: truths[pair] for pair in pairs}
    elif method == "constant":
        values = [
            s.readings[label]
            for s in train_net
            for label in scene.date_labels
            if label in s.readings
        ]
        mean_value = float(np.mean(values))
        preds = {pair: mean_value for pair in pairs}
    elif method in SPYCER_METHODS:
        cfg = replace(train_cfg, seed=seed, ablation=SPYCER_METHODS[method])
        samples = collect_samples(scene, train_net)
        state, _ = train_patches(samples, cfg, phys)
        test_samples = [
            extract_patch(scene, sensors.get(sid), label) for sid, label in pairs
        ]
        values = predict_center(state, test_samples)
        preds = {pair: float(v) for pair, v in zip(pairs, values)}
    elif method in BASELINE_METHODS:
        samples = collect_samples(scene, train_net)
        stats = ChannelStats.from_samples(samples)
        x_train, y_train, _ = bl.build_feature_rows(scene, train_net, stats)
        x_test, _, keys = bl.build_feature_rows(
            scene, sensors.subset(test_ids), stats
        )
        if method == "lr":
            coeffs = bl.fit_lr(x_train, y_train)
            values = bl.predict_lr(coeffs, x_test)
        elif method == "rf":
            model = bl.RandomForest(bl.ForestConfig(seed=seed)).fit(x_train, y_train)
            values = model.predict(x_test)
        elif method == "gb":
            model = bl.GradientBoosting().fit(x_train, y_train)
            values = model.predict(x_test)
        else:
            model = bl.MLPRegressor(bl.MLPConfig(seed=seed)).fit(x_train, y_train)
            values = model.predict(x_test)
        preds = {key: float(v) for key, v in zip(keys, values)}
    else:
        raise DataError(f"unknown method {method!r}")

    return [
        (sid, label, preds[(sid, label)], truths[(sid, label)])
        for sid, label in pairs
    ]


def _fold_task(payload):
    scene, sensors, method, train_ids, test_ids, seed, phys, train_cfg, fold = payload
    records = run_fold(scene, sensors, method, train_ids, test_ids, seed, phys, train_cfg)
    return fold, method, records


# ---------------------------------------------------------------------------
# metrics table
# ---------------------------------------------------------------------------


class MetricsTable:
    """Per method x month RMSE/MAE means and standard deviations over folds."""

    def __init__(self, cells: dict, n_folds: int):
        self.cells = cells  # (method, month) -> dict of metric values
        self.n_folds = n_folds

    @classmethod
    def from_records(cls, records: list, n_folds: int) -> "MetricsTable":
        """records: (fold, method, sensor, date, month, pred, truth) tuples."""
        grouped: dict = {}
        for fold, method, _sid, _date, month, pred, truth in records:
            grouped.setdefault((method, fold, month), []).append((pred, truth))
            grouped.setdefault((method, fold, "overall"), []).append((pred, truth))
        per_fold: dict = {}
        for (method, fold, month), pairs in grouped.items():
            p = np.array([a for a, _ in pairs])
            t = np.array([b for _, b in pairs])
            per_fold.setdefault((method, month), []).append(
                (fold, rmse(p, t), mae(p, t), len(pairs))
            )
        cells = {}
        for (method, month), entries in per_fold.items():
            entries.sort()  # by fold index: order-independent reduction
            r = np.array([e[1] for e in entries])
            m = np.array([e[2] for e in entries])
            cells[(method, month)] = {
                "rmse_mean": float(r.mean()),
                "rmse_std": float(r.std()),
                "mae_mean": float(m.mean()),
                "mae_std": float(m.std()),
                "n_points": int(sum(e[3] for e in entries)),
            }
        return cls(cells, n_folds)

    def methods(self) -> list:
        return sorted({method for method, _ in self.cells})

    def months(self) -> list:
        return sorted({month for _, month in self.cells if month != "overall"})

    def cell(self, method: str, month: str = "overall") -> dict:
        return self.cells[(method, month)]

    def check_metric_identity(self) -> None:
        for key, cell in self.cells.items():
            if cell["rmse_mean"] + 1e-12 < cell["mae_mean"]:
                raise DataError(f"RMSE < MAE in cell {key}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["method", "month", "rmse_mean", "rmse_std", "mae_mean", "mae_std", "n_points"]
            )
            for method in self.methods():
                for month in self.months() + ["overall"]:
                    if (method, month) not in self.cells:
                        continue
                    c = self.cells[(method, month)]
                    writer.writerow(
                        [
                            method,
                            month,
                            repr(c["rmse_mean"]),
                            repr(c["rmse_std"]),
                            repr(c["mae_mean"]),
                            repr(c["mae_std"]),
                            c["n_points"],
                        ]
                    )


def run_experiment(scene: Scene, sensors: SensorNetwork, methods, plan: FoldPlan,
                   phys: PhysicsConfig, train_cfg: TrainConfig,
                   threads: int = 1):
    """Run all (fold, method) combinations; returns (MetricsTable, records).

    Per-fold RNG streams derive as master_seed XOR fold index, so results
    do not depend on scheduling or worker count.
    """
    for method in methods:
        if method not in ALL_METHODS:
            raise DataError(f"unknown method {method!r}; expected one of {ALL_METHODS}")
    tasks = []
    for fold, (train_ids, test_ids) in enumerate(plan.folds):
        seed = plan.master_seed ^ fold
        for method in methods:
            tasks.append(
                (scene, sensors, method, train_ids, test_ids, seed, phys, train_cfg, fold)
            )

    results = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for fold, method, records in pool.map(_fold_task, tasks):
                results.append((fold, method, records))
    else:
        for task in tasks:
            results.append(_fold_task(task))
    results.sort(key=lambda r: (r[1], r[0]))

    flat = []
    for fold, method, records in results:
        for sid, label, pred, truth in records:
            flat.append((fold, method, sid, label, label[:7], pred, truth))
    table = MetricsTable.from_records(flat, plan.n_folds)
    return table, flat


# ---------------------------------------------------------------------------
# ablation comparison
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (("full", "spycer"), ("config1", "spycer_cfg1"),
                     ("config2", "spycer_cfg2"))
ABLATION_TIE_FACTOR = 1.02  # ties within 2 percent count as ordered


def _ablation_task(payload):
    scene, sensors, method, train_ids, test_ids, seed, phys, train_cfg, label = payload
    records = run_fold(scene, sensors, method, train_ids, test_ids, seed, phys, train_cfg)
    preds = np.array([r[2] for r in records])
    truths = np.array([r[3] for r in records])
    return seed, label, rmse(preds, truths), mae(preds, truths)


def run_ablation(scene: Scene, sensors: SensorNetwork, seeds, phys: PhysicsConfig,
                 train_cfg: TrainConfig, threads: int = 1) -> list:
    """Full vs config1 (no neighbor physics) vs config2 (no Gaussian).

    One 80/20 split per seed; the seed drives both the split and the
    training initialization, shared across the three variants. Returns
    (seed, variant, rmse, mae) rows.
    """
    tasks = []
    for seed in seeds:
        plan = make_folds(sensors.ids, 1, seed)
        train_ids, test_ids = plan.folds[0]
        for label, method in ABLATION_VARIANTS:
            tasks.append(
                (scene, sensors, method, train_ids, test_ids, seed, phys, train_cfg, label)
            )
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_ablation_task, tasks))
    else:
        results = [_ablation_task(t) for t in tasks]
    order = {label: i for i, (label, _) in enumerate(ABLATION_VARIANTS)}
    results.sort(key=lambda r: (r[0], order[r[1]]))
    return results


def ablation_ordering(rows: list) -> dict:
    """Per seed: does full <= config2 <= config1 hold, with 2 percent ties."""
    by_seed: dict = {}
    for seed, label, r, _m in rows:
        by_seed.setdefault(seed, {})[label] = r
    out = {}
    for seed, values in sorted(by_seed.items()):
        full, c1, c2 = values["full"], values["config1"], values["config2"]
        out[seed] = (full <= c2 * ABLATION_TIE_FACTOR) and (c2 <= c1 * ABLATION_TIE_FACTOR)
    return out


# ---------------------------------------------------------------------------
# map, curve, attention, and residual exports
# ---------------------------------------------------------------------------


def _scene_patch_stack(scene: Scene, date_label: str, stats: ChannelStats):
    """Normalized patch inputs for every margin-valid pixel of one date.

    Returns (x, lst_raw, rows, cols, valid): x is (N, 8, 7, 7) in scan
    order; valid marks pixels whose window is free of nodata.
    """
    ts = scene.timestamp(date_label)
    month = ts.month_label
    lst = scene.lst_at(date_label)
    grids = {name: scene.index_at(name, month) for name in ("ndvi", "ndwi", "ndbi")}

    def windows(grid):
        vals = np.where(grid.nodata_mask, np.nan, grid.values).astype(np.float64)
        return np.lib.stride_tricks.sliding_window_view(vals, (PATCH_SIZE, PATCH_SIZE))

    lst_w = windows(lst)
    n_rows, n_cols = lst_w.shape[:2]
    n = n_rows * n_cols
    x = np.empty((n, 8, PATCH_SIZE, PATCH_SIZE), dtype=np.float64)
    lst_flat = lst_w.reshape(n, PATCH_SIZE, PATCH_SIZE)
    x[:, CH_LST] = (lst_flat - stats.mean[CH_LST]) / stats.std[CH_LST]
    x_off, y_off = _offset_channels()
    x[:, CH_XOFF] = x_off
    x[:, CH_YOFF] = y_off
    sin_t, cos_t = ts.encode()
    x[:, CH_SIN] = sin_t
    x[:, CH_COS] = cos_t
    for ch, name in ((CH_NDVI, "ndvi"), (CH_NDWI, "ndwi"), (CH_NDBI, "ndbi")):
        w = windows(grids[name]).reshape(n, PATCH_SIZE, PATCH_SIZE)
        x[:, ch] = (w - stats.mean[ch]) / stats.std[ch]

    valid = np.isfinite(x.reshape(n, -1)).all(axis=1)
    rows = np.repeat(np.arange(n_rows) + PATCH_MARGIN, n_cols)
    cols = np.tile(np.arange(n_cols) + PATCH_MARGIN, n_rows)
    return x, lst_flat, rows, cols, valid, (sin_t, cos_t)


def export_map(state: ModelState, scene: Scene, date_label: str,
               chunk: int = 2048) -> VariableGrid:
    """Slide the patch model over every margin-valid pixel of one date.

    The 3-pixel margin (and any nodata-contaminated window) stays nodata.
    """
    x, _, rows, cols, valid, _ = _scene_patch_stack(scene, date_label, state.stats)
    meta = scene.meta
    out = np.full((meta.height, meta.width), np.nan, dtype=np.float32)
    idx = np.nonzero(valid)[0]
    xv = x[idx].astype(state.net.dtype)
    for start in range(0, xv.shape[0], chunk):
        part = slice(start, start + chunk)
        pred = state.net.forward(xv[part]).data[:, 3, 3]
        out[rows[idx[part]], cols[idx[part]]] = pred.astype(np.float32)
    return VariableGrid.from_raw(meta, out)


def export_residual_map(state: ModelState, scene: Scene, date_label: str,
                        chunk: int = 1024) -> VariableGrid:
    """Patch-center physics residual (degC/day) at every margin-valid pixel."""
    x, lst_raw, rows, cols, valid, (sin_t, cos_t) = _scene_patch_stack(
        scene, date_label, state.stats
    )
    meta = scene.meta
    out = np.full((meta.height, meta.width), np.nan, dtype=np.float32)
    idx = np.nonzero(valid)[0]
    xv = x[idx].astype(state.net.dtype)
    lv = lst_raw[idx].astype(state.net.dtype)
    for start in range(0, xv.shape[0], chunk):
        part = slice(start, start + chunk)
        n_part = xv[part].shape[0]
        pred, dtdt = forward_with_time_derivative(
            state.net, xv[part],
            np.full(n_part, sin_t, dtype=state.net.dtype),
            np.full(n_part, cos_t, dtype=state.net.dtype),
            state.physics.eps_t,
        )
        r = adr_residual_batch(pred, lv[part], dtdt, state.physics)
        out[rows[idx[part]], cols[idx[part]]] = r.data[:, 2, 2].astype(np.float32)
    return VariableGrid.from_raw(meta, out)


def attention_map(state: ModelState, scene: Scene, sensor, date_label: str) -> np.ndarray:
    """The 7x7 neighbor-weight map for one sensor patch (dropout off)."""
    from .grids import normalize_inputs

    patch = extract_patch(scene, sensor, date_label)
    norm = normalize_inputs(patch, state.stats)
    indices = norm.channels[CH_NDVI:CH_NDBI + 1][None].astype(state.att.dtype)
    w = state.att.weights(indices, train=False)
    return w.data[0].astype(np.float64).copy()


def temporal_curves(predict_fn, scene: Scene, sensors: SensorNetwork, ids) -> list:
    """Per-date predictions vs observed readings for selected sensors.

    predict_fn maps a list of PatchSample to an array of center
    predictions; rows come back as (sensor_id, date_label, pred, truth).
    """
    rows = []
    for sid in ids:
        sensor = sensors.get(sid)
        labels = [l for l in scene.date_labels if l in sensor.readings]
        samples = [extract_patch(scene, sensor, l) for l in labels]
        if not samples:
            continue
        preds = predict_fn(samples)
        for label, pred in zip(labels, preds):
            rows.append((sid, label, float(pred), sensor.readings[label]))
    return rows


def save_curves(rows: list, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sensor_id", "date", "prediction", "truth"])
        for sid, label, pred, truth in rows:
            writer.writerow([sid, label, repr(pred), repr(truth)])
