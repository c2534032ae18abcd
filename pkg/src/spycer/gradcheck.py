"""Finite-difference validation of every gradient path in the engine.

Runs in 64-bit mode: analytic gradients against central differences
(eps = 1e-5) for each primitive, the composed patch network, the
attention module, and the full training loss. Inputs that leave any relu
preactivation within 1e-3 of the kink are resampled, since a finite
difference stepping across the kink measures a subgradient mixture
rather than the implemented convention.

Each named check reports its maximum relative error over 10 seeds; the
suite passes when every value stays below 1e-6.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError
from .network import AttentionModule, SpycerNet
from .physics import PhysicsConfig
from .training import ABLATION_FULL, batch_loss

EPS = 1e-5
TOLERANCE = 1e-6
KINK_MARGIN = 1e-3
N_SEEDS = 10
DTYPE = np.float64


def _rel_err(analytic: float, numeric: float) -> float:
    # A coordinate where both sides vanish (for example the final logit
    # bias, which softmax is invariant to) carries only rounding noise.
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-7:
        return 0.0
    return abs(analytic - numeric) / scale


def _fd_check(build_loss, params: dict, max_coords: int = 6,
              coord_rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward() grads and central differences.

    build_loss re-evaluates the loss from current parameter data; it must
    be deterministic (fixed dropout draws) so perturbed evaluations only
    differ through the perturbed coordinate.
    """
    loss = build_loss()
    for p in params.values():
        p.zero_grad()
    ad.backward(loss)
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for name, p in params.items()}

    rng = coord_rng or np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        size = p.data.size
        n_coords = min(size, max_coords)
        coords = rng.choice(size, size=n_coords, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            original = flat[c]
            flat[c] = original + EPS
            up = build_loss().item()
            flat[c] = original - EPS
            down = build_loss().item()
            flat[c] = original
            numeric = (up - down) / (2.0 * EPS)
            worst = max(worst, _rel_err(float(grads[name].reshape(-1)[c]), numeric))
    return worst


def _with_margin(sample_fn, run_fn, max_tries: int = 400):
    """Re-draw inputs until no relu preactivation sits near the kink.

    The checked instances are kept narrow; the probability that every
    preactivation clears the margin shrinks with unit count, so composed
    checks run on reduced widths (the gradient rules are the same).
    """
    for attempt in range(max_tries):
        state = sample_fn(attempt)
        margins: list = []
        ad.RELU_MARGIN_TRACKER = margins
        try:
            run_fn(state)
        finally:
            ad.RELU_MARGIN_TRACKER = None
        if not margins or min(margins) > KINK_MARGIN:
            return state
    raise NumericError("could not sample inputs away from relu kinks")


# ---------------------------------------------------------------------------
# individual checks
# ---------------------------------------------------------------------------


def _check_elementwise(seed: int) -> float:
    rng = np.random.default_rng([seed, 10])
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=DTYPE)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=DTYPE)
    c = Tensor(rng.normal(size=(1, 4)) + 3.0, requires_grad=True, dtype=DTYPE)

    def loss():
        return ad.tsum(ad.square(a * b + a / c - b) * 0.5)

    return _fd_check(loss, {"a": a, "b": b, "c": c}, max_coords=12)


def _check_matmul(seed: int) -> float:
    rng = np.random.default_rng([seed, 11])
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True, dtype=DTYPE)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=DTYPE)
    bias = Tensor(rng.normal(size=4), requires_grad=True, dtype=DTYPE)

    def loss():
        return ad.tmean(ad.square(ad.matmul(x, w) + bias))

    return _fd_check(loss, {"x": x, "w": w, "b": bias}, max_coords=12)


def _check_conv(seed: int, k: int) -> float:
    rng = np.random.default_rng([seed, 12, k])
    x = Tensor(rng.normal(size=(2, 7, 7, 3)), requires_grad=True, dtype=DTYPE)
    w = Tensor(rng.normal(size=(k, k, 3, 4)), requires_grad=True, dtype=DTYPE)
    bias = Tensor(rng.normal(size=4), requires_grad=True, dtype=DTYPE)
    proj = np.asarray(rng.normal(size=(2, 7, 7, 4)))

    def loss():
        return ad.tsum(ad.conv2d(x, w, bias) * Tensor(proj))

    return _fd_check(loss, {"x": x, "w": w, "b": bias}, max_coords=10)


def _check_relu(seed: int) -> float:
    def sample(attempt):
        rng = np.random.default_rng([seed, 13, attempt])
        data = rng.normal(size=(4, 5))
        return Tensor(data, requires_grad=True, dtype=DTYPE)

    x = _with_margin(sample, lambda t: ad.relu(t))

    def loss():
        return ad.tsum(ad.square(ad.relu(x)))

    return _fd_check(loss, {"x": x}, max_coords=20)


def _check_softmax(seed: int) -> float:
    rng = np.random.default_rng([seed, 14])
    x = Tensor(rng.normal(size=(3, 9)), requires_grad=True, dtype=DTYPE)
    proj = np.asarray(rng.normal(size=(3, 9)))

    def loss():
        return ad.tsum(ad.softmax(x, axis=-1) * Tensor(proj))

    return _fd_check(loss, {"x": x}, max_coords=15)


def _check_dropout(seed: int) -> float:
    rng = np.random.default_rng([seed, 15])
    x = Tensor(rng.normal(size=(6, 6)), requires_grad=True, dtype=DTYPE)
    mask = np.random.default_rng([seed, 16]).random((6, 6)) >= 0.3

    def loss():
        return ad.tsum(ad.square(ad.dropout(x, 0.3, train=True, mask=mask)))

    return _fd_check(loss, {"x": x}, max_coords=15)


def _check_slicing(seed: int) -> float:
    rng = np.random.default_rng([seed, 17])
    x = Tensor(rng.normal(size=(2, 7, 7)), requires_grad=True, dtype=DTYPE)

    def loss():
        inner = x[:, 1:-1, 1:-1]
        col = ad.tsum(inner * inner, axis=(1, 2), keepdims=True)
        return ad.tsum(inner / (col + 1.0)) + ad.tmean(ad.reshape(x, (7, 14)))

    return _fd_check(loss, {"x": x}, max_coords=15)


def _randomize_heads(net=None, att=None, rng=None):
    """Output layers are zero-initialized for training; gradient checks
    need them live so every parameter actually influences the loss."""
    if net is not None:
        net.head.weight.data = rng.normal(0.0, 0.5, net.head.weight.shape)
    if att is not None:
        for _, conv2 in att.heads:
            conv2.weight.data = rng.normal(0.0, 0.5, conv2.weight.shape)


def _check_network(seed: int) -> float:
    def sample(attempt):
        rng = np.random.default_rng([seed, 18, attempt])
        net = SpycerNet(rng, width=8, n_blocks=2, target_mean=1.0,
                        target_std=2.0, dtype=DTYPE)
        _randomize_heads(net=net, rng=rng)
        x = rng.normal(size=(1, 8, 7, 7)) * 0.5
        proj = rng.normal(size=(1, 7, 7))
        return net, x, proj

    net, x, proj = _with_margin(sample, lambda s: s[0].forward(s[1]))

    def loss():
        return ad.tsum(net.forward(x) * Tensor(proj))

    return _fd_check(loss, net.parameters(), max_coords=4,
                     coord_rng=np.random.default_rng([seed, 19]))


def _check_attention(seed: int) -> float:
    def sample(attempt):
        rng = np.random.default_rng([seed, 20, attempt])
        att = AttentionModule(rng, n_heads=2, hidden=8, dtype=DTYPE)
        _randomize_heads(att=att, rng=rng)
        idx = rng.uniform(-1.0, 1.0, size=(1, 3, 7, 7))
        proj = rng.normal(size=(1, 7, 7))
        return att, idx, proj

    def run(state):
        att, idx, _ = state
        att.weights(idx, train=True, rng=np.random.default_rng([seed, 21]))

    att, idx, proj = _with_margin(sample, run)

    def loss():
        w = att.weights(idx, train=True, rng=np.random.default_rng([seed, 21]))
        return ad.tsum(w * Tensor(proj))

    return _fd_check(loss, att.parameters(), max_coords=5,
                     coord_rng=np.random.default_rng([seed, 22]))


def _check_full_loss(seed: int) -> float:
    phys = PhysicsConfig()

    def sample(attempt):
        rng = np.random.default_rng([seed, 23, attempt])
        net = SpycerNet(rng, width=6, n_blocks=1, target_mean=15.0,
                        target_std=3.0, dtype=DTYPE)
        att = AttentionModule(rng, n_heads=2, hidden=6, dtype=DTYPE)
        _randomize_heads(net=net, att=att, rng=rng)
        x = rng.normal(size=(1, 8, 7, 7)) * 0.5
        x[:, 5:8] = rng.uniform(-1.0, 1.0, size=(1, 3, 7, 7))
        theta = rng.uniform(0.0, 2.0 * np.pi, size=1)
        x[:, 3] = np.sin(theta)[:, None, None]
        x[:, 4] = np.cos(theta)[:, None, None]
        lst = 15.0 + rng.normal(size=(1, 7, 7))
        targets = 15.0 + rng.normal(size=1)
        return net, att, x, np.sin(theta), np.cos(theta), lst, targets

    def run(state):
        net, att, x, sin_t, cos_t, lst, targets = state
        batch_loss(net, att, x, sin_t, cos_t, lst, targets, phys,
                   ABLATION_FULL, train=True,
                   rng=np.random.default_rng([seed, 24]))

    state = _with_margin(sample, run)
    net, att, x, sin_t, cos_t, lst, targets = state

    def loss():
        total, _, _ = batch_loss(net, att, x, sin_t, cos_t, lst, targets,
                                 phys, ABLATION_FULL, train=True,
                                 rng=np.random.default_rng([seed, 24]))
        return total

    params = {**net.parameters(), **att.parameters()}
    return _fd_check(loss, params, max_coords=3,
                     coord_rng=np.random.default_rng([seed, 25]))


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------

CHECKS = {
    "elementwise": _check_elementwise,
    "matmul_bias": _check_matmul,
    "conv2d_3x3": lambda s: _check_conv(s, 3),
    "conv2d_1x1": lambda s: _check_conv(s, 1),
    "relu": _check_relu,
    "softmax": _check_softmax,
    "dropout": _check_dropout,
    "slicing_reductions": _check_slicing,
    "patch_network": _check_network,
    "attention_module": _check_attention,
    "full_patch_loss": _check_full_loss,
}


def _corrupted_relu(a: Tensor) -> Tensor:
    """relu with a deliberately wrong backward rule (negative control)."""
    mask = a.data > 0

    def bw(g):
        a.accumulate(g * mask * 1.01)

    return ad._make(np.where(mask, a.data, 0), (a,), bw)


def run_gradcheck(n_seeds: int = N_SEEDS, corrupt: bool = False) -> dict:
    """Run the full suite; returns {check name: max relative error}."""
    original_relu = ad.relu
    if corrupt:
        ad.relu = _corrupted_relu
    try:
        report = {}
        for name, check in CHECKS.items():
            report[name] = max(check(seed) for seed in range(n_seeds))
        return report
    finally:
        ad.relu = original_relu


def report_passes(report: dict) -> bool:
    return all(v < TOLERANCE for v in report.values())


def format_report(report: dict) -> str:
    lines = []
    for name, err in report.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        lines.append(f"{name:24s} max_rel_err={err:.3e}  [{status}]")
    verdict = "PASS" if report_passes(report) else "FAIL"
    lines.append(f"gradcheck: {verdict} (tolerance {TOLERANCE:g}, {N_SEEDS} seeds)")
    return "\n".join(lines)
