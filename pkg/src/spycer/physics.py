"""Diffusion-reaction residual and its ingredients.

The residual on a predicted patch is

    r = dTa/dt - K_eff * Lap(Ta_hat) - alpha * (Ts - Ta_hat)

evaluated on the 5x5 interior where the 5-point stencil fits. K is
dimensionless and wrapped as K_eff = K * h^2 per day (the same convention
the simulator uses), so K_eff * Lap reduces to K times the raw 4-neighbor
difference per day.

The temporal derivative comes from the seasonal encoding: central
differences on the sin/cos input channels combined by the chain rule,

    dTa/dt = (2 pi / 365) * (dTa/dsin * cos(theta) - dTa/dcos * sin(theta)).

Those perturbed evaluations are ordinary forward passes, so training
gradients flow through them by plain reverse mode; no nested tapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, NonPositiveResistance
from .grids import CH_COS, CH_SIN, DAYS_PER_YEAR

TIME_SCALE = 2.0 * np.pi / DAYS_PER_YEAR


@dataclass(frozen=True)
class PhysicsConfig:
    """Physical / loss coefficients shared by the residual and the loss."""

    K: float = 0.8          # dimensionless diffusion coefficient
    alpha: float = 0.5      # surface coupling, 1/day
    lam: float = 0.9        # physics-loss weight in the total patch loss
    sigma: float = 1.5      # Gaussian modulation width, pixels
    eps_t: float = 1e-3     # perturbation step on the sin/cos channels
    h: float = 10.0         # grid resolution, meters

    def __post_init__(self):
        for name in ("K", "alpha", "sigma", "eps_t", "h"):
            if getattr(self, name) <= 0:
                raise DataError(f"PhysicsConfig.{name} must be strictly positive")
        if not (0.0 <= self.lam <= 1.0):
            raise DataError(f"PhysicsConfig.lam must lie in [0, 1], got {self.lam}")

    @property
    def k_eff(self) -> float:
        """Diffusion coefficient in m^2/day: K * h^2."""
        return self.K * self.h * self.h


@dataclass(frozen=True)
class ResidualField:
    """Residual values on the 5x5 patch interior, degC/day."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (5, 5):
            raise DataError(f"residual field must be 5x5, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("residual field holds non-finite values")


def laplacian5(field: np.ndarray, h: float) -> np.ndarray:
    """5-point Laplacian of a 2-D map on its interior, degC/m^2."""
    f = np.asarray(field)
    return (
        f[:-2, 1:-1] + f[2:, 1:-1] + f[1:-1, :-2] + f[1:-1, 2:] - 4.0 * f[1:-1, 1:-1]
    ) / (h * h)


def laplacian5_t(field: Tensor, h: float) -> Tensor:
    """Differentiable 5-point Laplacian on (B, H, W) tensors."""
    c = field[:, 1:-1, 1:-1]
    n = field[:, :-2, 1:-1]
    s = field[:, 2:, 1:-1]
    w = field[:, 1:-1, :-2]
    e = field[:, 1:-1, 2:]
    return (n + s + w + e - c * 4.0) * (1.0 / (h * h))


def forward_with_time_derivative(net, x: np.ndarray, sin_t: np.ndarray,
                                 cos_t: np.ndarray, eps_t: float):
    """Base prediction and its seasonal time derivative, batched.

    x is the normalized (B, 8, 7, 7) input stack; sin_t/cos_t are the
    per-sample encoding values. All five forward passes run as one batch;
    returns (pred, dTa/dt) as (B, 7, 7) tensors with gradients attached.
    """
    b = x.shape[0]
    variants = np.concatenate([x, x, x, x, x], axis=0)
    variants[b:2 * b, CH_SIN] += eps_t
    variants[2 * b:3 * b, CH_SIN] -= eps_t
    variants[3 * b:4 * b, CH_COS] += eps_t
    variants[4 * b:5 * b, CH_COS] -= eps_t

    out = net.forward(variants)
    pred = out[0:b]
    d_dsin = (out[b:2 * b] - out[2 * b:3 * b]) * (1.0 / (2.0 * eps_t))
    d_dcos = (out[3 * b:4 * b] - out[4 * b:5 * b]) * (1.0 / (2.0 * eps_t))

    cos_col = cos_t.reshape(b, 1, 1)
    sin_col = sin_t.reshape(b, 1, 1)
    dtdt = (d_dsin * cos_col - d_dcos * sin_col) * TIME_SCALE
    return pred, dtdt


def temporal_derivative(net, patch: np.ndarray, eps_t: float) -> np.ndarray:
    """Interior 5x5 dTa/dt (degC/day) for a single normalized patch."""
    sin_t = np.array([patch[CH_SIN, 0, 0]])
    cos_t = np.array([patch[CH_COS, 0, 0]])
    _, dtdt = forward_with_time_derivative(net, patch[None], sin_t, cos_t, eps_t)
    return dtdt.data[0, 1:-1, 1:-1].copy()


def adr_residual(pred: np.ndarray, lst_raw: np.ndarray, dtdt: np.ndarray,
                 cfg: PhysicsConfig) -> ResidualField:
    """Residual of one 7x7 prediction against its raw LST patch."""
    if pred.shape != lst_raw.shape:
        raise DataError(f"pred {pred.shape} vs lst {lst_raw.shape}")
    lap = laplacian5(pred, cfg.h)
    interior = (slice(1, -1), slice(1, -1))
    r = dtdt - cfg.k_eff * lap - cfg.alpha * (lst_raw[interior] - pred[interior])
    return ResidualField(np.asarray(r, dtype=np.float64))


def adr_residual_batch(pred: Tensor, lst_raw: np.ndarray, dtdt: Tensor,
                       cfg: PhysicsConfig) -> Tensor:
    """Differentiable residual on (B, 7, 7) predictions -> (B, 5, 5)."""
    lap = laplacian5_t(pred, cfg.h)
    pred_i = pred[:, 1:-1, 1:-1]
    dtdt_i = dtdt[:, 1:-1, 1:-1]
    lst_i = np.ascontiguousarray(lst_raw[:, 1:-1, 1:-1])
    coupling = (pred_i - lst_i) * cfg.alpha
    return dtdt_i - lap * cfg.k_eff + coupling


def sensible_heat_flux(ts_c: float, ta_c: float, rho: float = 1.2,
                       cp: float = 1005.0, ra: float = 50.0) -> float:
    """Diagnostic sensible heat flux in W/m^2: rho * cp * (Ts - Ta) / ra.

    Not part of the training loss; the loss absorbs rho * cp / ra into the
    coupling coefficient.
    """
    if ra <= 0:
        raise NonPositiveResistance(f"aerodynamic resistance must be > 0, got {ra}")
    return rho * cp * (ts_c - ta_c) / ra


def grid_residual_series(nsat: list, lst: list, spacing_days: float,
                         cfg: PhysicsConfig) -> list:
    """Full-grid residuals of a stored NSAT series against its LST forcing.

    The temporal derivative is a central difference across stored dates, so
    residuals exist for interior dates only; spatially they cover the
    interior ring where the stencil fits. Used to verify that the simulator
    output satisfies the same equation the training loss enforces.
    """
    if len(nsat) != len(lst):
        raise DataError("nsat and lst series lengths differ")
    if len(nsat) < 3:
        raise DataError("need at least 3 dates for a central time difference")
    interior = (slice(1, -1), slice(1, -1))
    out = []
    for k in range(1, len(nsat) - 1):
        dtdt = (nsat[k + 1] - nsat[k - 1]) / (2.0 * spacing_days)
        lap = laplacian5(nsat[k], cfg.h)
        r = dtdt[interior] - cfg.k_eff * lap - cfg.alpha * (
            lst[k][interior] - nsat[k][interior]
        )
        out.append(r)
    return out
