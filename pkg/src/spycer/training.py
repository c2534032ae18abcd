"""Semi-supervised patch loss and the training loop.

The per-patch loss is

    L = (pred[center] - target)^2
        + lambda * (r[center]^2 + sum_n w_hat(n) * r(n)^2)

where r is the diffusion-reaction residual on the 5x5 interior and the
neighbor weights come from the attention module, renormalized over the 24
interior neighbors so they still form a probability distribution on the
evaluable set. Two ablations: dropping the neighbor sum entirely, and
keeping it but skipping the Gaussian distance modulation.

Model and attention parameters train with independent Adam states and
separate learning rates. Everything is seeded: parameter init, batch
shuffling, and dropout draw from fixed per-purpose streams, so a fixed
seed reproduces the final checkpoint bit for bit.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import DataError, InsufficientData, NumericError
from .grids import (
    CH_COS,
    CH_NDBI,
    CH_NDVI,
    CH_SIN,
    ChannelStats,
    PatchSample,
    Scene,
    SensorNetwork,
    extract_patch,
    normalize_inputs,
    patch_has_nodata,
)
from .network import AttentionModule, SpycerNet
from .physics import PhysicsConfig, adr_residual_batch, forward_with_time_derivative

log = logging.getLogger(__name__)

ABLATION_FULL = "full"
ABLATION_NO_NEIGHBOR = "no_neighbor_physics"  # drops the neighbor physics sum
ABLATION_NO_GAUSSIAN = "no_gaussian"          # keeps it, skips Gaussian modulation
ABLATIONS = (ABLATION_FULL, ABLATION_NO_NEIGHBOR, ABLATION_NO_GAUSSIAN)

# 5x5 interior with the patch center removed: the 24 evaluable neighbors.
_NEIGHBOR_MASK = np.ones((5, 5))
_NEIGHBOR_MASK[2, 2] = 0.0
_WEIGHT_SUM_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    lr_model: float = 3e-3
    lr_attention: float = 5e-5
    batch_size: int = 64
    seed: int = 0
    ablation: str = ABLATION_FULL

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.ablation not in ABLATIONS:
            raise DataError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")


@dataclass
class ModelState:
    """Trained model plus everything needed to run it on new patches."""

    net: SpycerNet
    att: AttentionModule
    stats: ChannelStats
    physics: PhysicsConfig


def patch_loss(pred: np.ndarray, target: float, weights: np.ndarray,
               residual, cfg: PhysicsConfig,
               ablation: str = ABLATION_FULL) -> float:
    """Reference (non-differentiable) patch loss for a single sample.

    The training loop evaluates the identical expression through the
    autodiff graph; this plain-numpy version doubles as its cross-check.
    """
    r = residual.values if hasattr(residual, "values") else np.asarray(residual)
    sup = (pred[3, 3] - target) ** 2
    phys = r[2, 2] ** 2
    if ablation != ABLATION_NO_NEIGHBOR:
        w = np.asarray(weights)[1:-1, 1:-1] * _NEIGHBOR_MASK
        total = w.sum()
        if total > _WEIGHT_SUM_FLOOR:
            w = w / total
        phys = phys + (w * r * r).sum()
    return float(sup + cfg.lam * phys)


def batch_loss(net: SpycerNet, att: AttentionModule, x: np.ndarray,
               sin_t: np.ndarray, cos_t: np.ndarray, lst_raw: np.ndarray,
               targets: np.ndarray, phys: PhysicsConfig, ablation: str,
               train: bool = False, rng: np.random.Generator | None = None):
    """Batched total loss; returns (total, sup, phys) scalar tensors.

    sup and phys are per-batch means of the supervised and physics terms.
    """
    b = x.shape[0]
    if phys.lam == 0.0:
        pred = net.forward(x)
        err = pred[:, 3, 3] - targets
        sup = ad.tmean(ad.square(err))
        zero = Tensor(np.zeros((), dtype=x.dtype))
        return sup, sup, zero

    pred, dtdt = forward_with_time_derivative(net, x, sin_t, cos_t, phys.eps_t)
    r = adr_residual_batch(pred, lst_raw, dtdt, phys)
    r2 = ad.square(r)
    phys_per = r2[:, 2, 2]

    if ablation != ABLATION_NO_NEIGHBOR:
        indices = np.ascontiguousarray(x[:, CH_NDVI:CH_NDBI + 1])
        w = att.weights(indices, train=train, rng=rng,
                        use_gaussian=(ablation != ABLATION_NO_GAUSSIAN))
        w_int = w[:, 1:-1, 1:-1] * Tensor(_NEIGHBOR_MASK.astype(x.dtype))
        total_w = ad.tsum(w_int, axis=(1, 2), keepdims=True) + _WEIGHT_SUM_FLOOR
        w_norm = w_int / total_w
        phys_per = phys_per + ad.tsum(w_norm * r2, axis=(1, 2))

    err = pred[:, 3, 3] - targets
    sup = ad.tmean(ad.square(err))
    phys_mean = ad.tmean(phys_per)
    total = sup + phys_mean * phys.lam
    return total, sup, phys_mean


def collect_samples(scene: Scene, sensors: SensorNetwork) -> list:
    """All extractable (sensor, date) patches, skipping nodata overlaps."""
    samples = []
    for sensor in sensors:
        for label in scene.date_labels:
            if label not in sensor.readings:
                continue
            if patch_has_nodata(scene, sensor, label):
                log.debug("skipping %s at %s: nodata overlap", sensor.id, label)
                continue
            samples.append(extract_patch(scene, sensor, label))
    return samples


def prepare_arrays(samples: list, stats: ChannelStats, dtype=np.float32):
    """Normalize samples and pack them into training arrays."""
    normalized = [normalize_inputs(s, stats) for s in samples]
    x = np.stack([s.channels for s in normalized]).astype(dtype)
    lst_raw = np.stack([s.lst_patch_raw for s in samples]).astype(dtype)
    targets = np.array([s.target_nsat for s in samples], dtype=dtype)
    sin_t = np.array([s.channels[CH_SIN, 0, 0] for s in normalized], dtype=dtype)
    cos_t = np.array([s.channels[CH_COS, 0, 0] for s in normalized], dtype=dtype)
    return x, sin_t, cos_t, lst_raw, targets


def train_patches(samples: list, train_cfg: TrainConfig, phys: PhysicsConfig,
                  net: SpycerNet | None = None,
                  att: AttentionModule | None = None,
                  stats: ChannelStats | None = None,
                  dtype=np.float32):
    """Optimize on prepared samples; returns (ModelState, history rows)."""
    if not samples:
        raise InsufficientData("no training samples")
    stats = stats or ChannelStats.from_samples(samples)
    x, sin_t, cos_t, lst_raw, targets = prepare_arrays(samples, stats, dtype)

    init_rng = np.random.default_rng([train_cfg.seed, 0])
    shuffle_rng = np.random.default_rng([train_cfg.seed, 1])
    dropout_rng = np.random.default_rng([train_cfg.seed, 2])
    if net is None:
        net = SpycerNet(init_rng, target_mean=stats.target_mean,
                        target_std=stats.target_std, dtype=dtype)
    if att is None:
        att = AttentionModule(init_rng, sigma=phys.sigma, dtype=dtype)

    opt_model = Adam(net.parameters(), lr=train_cfg.lr_model)
    opt_att = Adam(att.parameters(), lr=train_cfg.lr_attention)

    n = x.shape[0]
    history = []
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        sup_sum = 0.0
        phys_sum = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            total, sup, phys_term = batch_loss(
                net, att, x[idx], sin_t[idx], cos_t[idx], lst_raw[idx],
                targets[idx], phys, train_cfg.ablation,
                train=True, rng=dropout_rng,
            )
            if not np.isfinite(total.data):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            opt_model.zero_grad()
            opt_att.zero_grad()
            ad.backward(total)
            opt_model.step()
            opt_att.step()
            sup_sum += sup.item() * len(idx)
            phys_sum += phys_term.item() * len(idx)
        history.append(
            {
                "epoch": epoch,
                "sup_loss": sup_sum / n,
                "phys_loss": phys_sum / n,
                "total": sup_sum / n + phys.lam * phys_sum / n,
            }
        )
    return ModelState(net, att, stats, phys), history


def train(scene: Scene, sensors: SensorNetwork, train_cfg: TrainConfig,
          phys: PhysicsConfig, dtype=np.float32):
    """Full training entry point from a scene and a sensor network."""
    if len(sensors) < 2:
        raise InsufficientData(f"training needs >= 2 sensors, got {len(sensors)}")
    samples = collect_samples(scene, sensors)
    if not samples:
        raise InsufficientData("no extractable training patches")
    if len({s.sensor_id for s in samples}) < 2:
        raise InsufficientData("training patches cover fewer than 2 sensors")
    return train_patches(samples, train_cfg, phys, dtype=dtype)


def save_history(history: list, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "sup_loss", "phys_loss", "total"])
        for row in history:
            writer.writerow(
                [row["epoch"], repr(row["sup_loss"]), repr(row["phys_loss"]), repr(row["total"])]
            )


def predict_center(state: ModelState, samples: list) -> np.ndarray:
    """Dropout-off center-pixel predictions (degC) for a list of patches."""
    if not samples:
        return np.zeros(0)
    normalized = [normalize_inputs(s, state.stats) for s in samples]
    x = np.stack([s.channels for s in normalized]).astype(state.net.dtype)
    out = state.net.forward(x)
    return out.data[:, 3, 3].astype(np.float64).copy()
