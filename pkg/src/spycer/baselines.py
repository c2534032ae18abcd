"""Reference estimators trained on center-pixel features.

All baselines are written from scratch on numpy (the MLP reuses the
autodiff engine). They consume one feature row per (sensor, date):

    [lst_z, x_norm, y_norm, sin_t, cos_t, ndvi_z, ndwi_z, ndbi_z]

with LST and index values z-scored by the same training statistics the
patch model uses, and coordinates normalized by the scene extent. IDW is
the qualitative map reference and works directly on sensor positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import Degenerate, InsufficientData, NoSensors
from .grids import (
    CH_LST,
    CH_NDBI,
    CH_NDVI,
    CH_NDWI,
    ChannelStats,
    GridMeta,
    Scene,
    SensorNetwork,
    VariableGrid,
)

FEATURE_NAMES = ("lst", "x_norm", "y_norm", "sin_t", "cos_t", "ndvi", "ndwi", "ndbi")


def build_feature_rows(scene: Scene, sensors: SensorNetwork, stats: ChannelStats):
    """Feature matrix, targets, and (sensor_id, date_label) keys."""
    rows = []
    targets = []
    keys = []
    meta = scene.meta
    extent_x = meta.width * meta.resolution_m
    extent_y = meta.height * meta.resolution_m
    for sensor in sensors:
        r, c = sensor.pixel_row, sensor.pixel_col
        x_norm = (sensor.x_utm - meta.origin_x) / extent_x
        y_norm = (meta.origin_y - sensor.y_utm) / extent_y
        for label in scene.date_labels:
            if label not in sensor.readings:
                continue
            ts = scene.timestamp(label)
            lst = scene.lst_at(label)
            month = ts.month_label
            grids = {
                name: scene.index_at(name, month) for name in ("ndvi", "ndwi", "ndbi")
            }
            if lst.nodata_mask[r, c] or any(g.nodata_mask[r, c] for g in grids.values()):
                continue
            sin_t, cos_t = ts.encode()
            rows.append(
                [
                    (lst.values[r, c] - stats.mean[CH_LST]) / stats.std[CH_LST],
                    x_norm,
                    y_norm,
                    sin_t,
                    cos_t,
                    (grids["ndvi"].values[r, c] - stats.mean[CH_NDVI]) / stats.std[CH_NDVI],
                    (grids["ndwi"].values[r, c] - stats.mean[CH_NDWI]) / stats.std[CH_NDWI],
                    (grids["ndbi"].values[r, c] - stats.mean[CH_NDBI]) / stats.std[CH_NDBI],
                ]
            )
            targets.append(sensor.readings[label])
            keys.append((sensor.id, label))
    return np.array(rows, dtype=np.float64), np.array(targets, dtype=np.float64), keys


# ---------------------------------------------------------------------------
# linear regression
# ---------------------------------------------------------------------------


def fit_lr(x: np.ndarray, y: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    """Ridge-regularized normal equations; returns [slopes..., intercept]."""
    if x.shape[0] < 2:
        raise InsufficientData("linear regression needs >= 2 rows")
    if np.all(x == x[0]):
        raise Degenerate("all feature rows identical")
    design = np.hstack([x, np.ones((x.shape[0], 1))])
    gram = design.T @ design + ridge * np.eye(design.shape[1])
    return np.linalg.solve(gram, design.T @ y)


def predict_lr(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x @ coeffs[:-1] + coeffs[-1]


# ---------------------------------------------------------------------------
# regression trees
# ---------------------------------------------------------------------------


class RegressionTree:
    """Binary tree with exact variance-reduction splits, flat-array storage."""

    def __init__(self, max_depth: int):
        self.max_depth = max_depth
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    @staticmethod
    def _best_split(x: np.ndarray, y: np.ndarray):
        """Lowest-SSE split over all features; None when nothing separates."""
        n = y.size
        best = (np.inf, -1, 0.0)
        y_sq = y * y
        for f in range(x.shape[1]):
            order = np.argsort(x[:, f], kind="stable")
            xs = x[order, f]
            ys = y[order]
            valid = xs[1:] > xs[:-1]
            if not valid.any():
                continue
            cnt_l = np.arange(1, n)
            s1 = np.cumsum(ys)[:-1]
            s2 = np.cumsum(y_sq[order])[:-1]
            sse_l = s2 - s1 * s1 / cnt_l
            s1_tot = ys.sum()
            s2_tot = (ys * ys).sum()
            cnt_r = n - cnt_l
            sse_r = (s2_tot - s2) - (s1_tot - s1) ** 2 / cnt_r
            score = np.where(valid, sse_l + sse_r, np.inf)
            i = int(np.argmin(score))
            if score[i] < best[0]:
                best = (float(score[i]), f, float((xs[i] + xs[i + 1]) / 2.0))
        if best[1] < 0:
            return None
        return best[1], best[2]

    def fit(self, x: np.ndarray, y: np.ndarray) -> "RegressionTree":
        stack = [(self._new_node(), np.arange(y.size), 0)]
        while stack:
            node, idx, depth = stack.pop()
            ys = y[idx]
            self.value[node] = float(ys.mean())
            if depth >= self.max_depth or idx.size < 2 or np.all(ys == ys[0]):
                continue
            split = self._best_split(x[idx], ys)
            if split is None:
                continue
            f, thr = split
            go_left = x[idx, f] <= thr
            self.feature[node] = f
            self.threshold[node] = thr
            left = self._new_node()
            right = self._new_node()
            self.left[node] = left
            self.right[node] = right
            stack.append((left, idx[go_left], depth + 1))
            stack.append((right, idx[~go_left], depth + 1))
        self._feature = np.array(self.feature)
        self._threshold = np.array(self.threshold)
        self._left = np.array(self.left)
        self._right = np.array(self.right)
        self._value = np.array(self.value)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            internal = self._feature[node] >= 0
            if not internal.any():
                break
            rows = np.nonzero(internal)[0]
            cur = node[rows]
            go_left = x[rows, self._feature[cur]] <= self._threshold[cur]
            node[rows] = np.where(go_left, self._left[cur], self._right[cur])
        return self._value[node]


@dataclass
class ForestConfig:
    n_trees: int = 300
    max_depth: int = 15
    seed: int = 0


class RandomForest:
    """Bootstrap-aggregated trees; prediction is the plain tree mean."""

    def __init__(self, cfg: ForestConfig | None = None):
        self.cfg = cfg or ForestConfig()
        self.trees: list[RegressionTree] = []

    def fit(self, x: np.ndarray, y: np.ndarray) -> "RandomForest":
        if y.size < 5:
            raise InsufficientData("random forest needs >= 5 rows")
        self.trees = []
        for t in range(self.cfg.n_trees):
            rng = np.random.default_rng([self.cfg.seed, t])
            idx = rng.integers(0, y.size, size=y.size)
            self.trees.append(RegressionTree(self.cfg.max_depth).fit(x[idx], y[idx]))
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.mean([tree.predict(x) for tree in self.trees], axis=0)


@dataclass
class BoostConfig:
    n_trees: int = 500
    max_depth: int = 6
    shrinkage: float = 0.05


class GradientBoosting:
    """Squared-error boosting: each tree fits the current residuals."""

    def __init__(self, cfg: BoostConfig | None = None):
        self.cfg = cfg or BoostConfig()
        self.base = 0.0
        self.trees: list[RegressionTree] = []

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GradientBoosting":
        if y.size < 5:
            raise InsufficientData("gradient boosting needs >= 5 rows")
        self.base = float(y.mean())
        self.trees = []
        current = np.full(y.size, self.base)
        for _ in range(self.cfg.n_trees):
            tree = RegressionTree(self.cfg.max_depth).fit(x, y - current)
            self.trees.append(tree)
            current = current + self.cfg.shrinkage * tree.predict(x)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.full(x.shape[0], self.base)
        for tree in self.trees:
            out = out + self.cfg.shrinkage * tree.predict(x)
        return out

    def staged_train_sse(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Training SSE after each tree (diagnostic for the boosting property)."""
        out = np.empty(len(self.trees))
        current = np.full(y.size, self.base)
        for i, tree in enumerate(self.trees):
            current = current + self.cfg.shrinkage * tree.predict(x)
            out[i] = ((y - current) ** 2).sum()
        return out


# ---------------------------------------------------------------------------
# MLP on the shared engine
# ---------------------------------------------------------------------------


@dataclass
class MLPConfig:
    hidden: tuple = (64, 64)
    lr: float = 0.03
    epochs: int = 2000
    batch_size: int = 64
    seed: int = 0


class MLPRegressor:
    """Small relu MLP with z-scored targets, trained with Adam."""

    def __init__(self, cfg: MLPConfig | None = None, dtype=np.float32):
        self.cfg = cfg or MLPConfig()
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.y_mean = 0.0
        self.y_std = 1.0

    def _init_params(self, n_features: int, rng: np.random.Generator) -> None:
        sizes = (n_features, *self.cfg.hidden, 1)
        self.params = {}
        for i in range(len(sizes) - 1):
            std = np.sqrt(2.0 / sizes[i])
            self.params[f"mlp/w{i}"] = Tensor(
                rng.normal(0.0, std, (sizes[i], sizes[i + 1])),
                requires_grad=True, dtype=self.dtype,
            )
            self.params[f"mlp/b{i}"] = Tensor(
                np.zeros(sizes[i + 1]), requires_grad=True, dtype=self.dtype
            )

    def _forward(self, x: Tensor) -> Tensor:
        n_layers = len(self.params) // 2
        h = x
        for i in range(n_layers):
            h = ad.matmul(h, self.params[f"mlp/w{i}"]) + self.params[f"mlp/b{i}"]
            if i < n_layers - 1:
                h = ad.relu(h)
        return h

    def fit(self, x: np.ndarray, y: np.ndarray) -> "MLPRegressor":
        if y.size < 5:
            raise InsufficientData("MLP needs >= 5 rows")
        self.y_mean = float(y.mean())
        self.y_std = float(max(y.std(), 1e-6))
        y_norm = ((y - self.y_mean) / self.y_std).astype(self.dtype)
        x = x.astype(self.dtype)

        init_rng = np.random.default_rng([self.cfg.seed, 0])
        shuffle_rng = np.random.default_rng([self.cfg.seed, 1])
        self._init_params(x.shape[1], init_rng)
        opt = Adam(self.params, lr=self.cfg.lr)
        n = y.size
        for _ in range(self.cfg.epochs):
            order = shuffle_rng.permutation(n)
            for start in range(0, n, self.cfg.batch_size):
                idx = order[start:start + self.cfg.batch_size]
                out = self._forward(Tensor(x[idx]))[:, 0]
                loss = ad.tmean(ad.square(out - y_norm[idx]))
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = self._forward(Tensor(x.astype(self.dtype)))
        return out.data[:, 0].astype(np.float64) * self.y_std + self.y_mean


# ---------------------------------------------------------------------------
# inverse distance weighting
# ---------------------------------------------------------------------------


def idw_values(xs: np.ndarray, ys: np.ndarray, readings: np.ndarray,
               qx: np.ndarray, qy: np.ndarray, power: float = 2.0) -> np.ndarray:
    """IDW estimate at query points; exact where a query hits a sensor."""
    if readings.size == 0:
        raise NoSensors("IDW needs at least one sensor reading")
    d2 = (qx[:, None] - xs[None, :]) ** 2 + (qy[:, None] - ys[None, :]) ** 2
    exact = d2 <= 1e-18
    with np.errstate(divide="ignore"):
        w = d2 ** (-power / 2.0)
    w[exact] = 0.0
    num = w @ readings
    den = w.sum(axis=1)
    hit_rows = exact.any(axis=1)
    den[hit_rows] = 1.0
    out = num / den
    if hit_rows.any():
        first_hit = np.argmax(exact[hit_rows], axis=1)
        out[hit_rows] = readings[first_hit]
    return out


def idw_map(sensors: SensorNetwork, date_label: str, meta: GridMeta,
            power: float = 2.0) -> VariableGrid:
    """Full-grid IDW interpolation of the sensor readings at one date.

    Sensor pixels carry the exact reading; everything else is the
    inverse-distance convex combination, so the map is bounded by the
    sensor value range.
    """
    active = [s for s in sensors if date_label in s.readings]
    if not active:
        raise NoSensors(f"no sensor has a reading at {date_label}")
    xs = np.array([s.x_utm for s in active])
    ys = np.array([s.y_utm for s in active])
    vals = np.array([s.readings[date_label] for s in active])

    cols = meta.origin_x + np.arange(meta.width) * meta.resolution_m
    rows = meta.origin_y - np.arange(meta.height) * meta.resolution_m
    qx, qy = np.meshgrid(cols, rows)
    est = idw_values(xs, ys, vals, qx.ravel(), qy.ravel(), power)
    grid = est.reshape(meta.height, meta.width)
    for s in active:
        grid[s.pixel_row, s.pixel_col] = s.readings[date_label]
    return VariableGrid.full(meta, grid)
