"""The patch model: a small residual CNN plus convolutional neighbor attention.

The estimation network maps a normalized 8x7x7 patch to a dense 7x7 NSAT
map in degC (denormalized by training-target statistics). The attention
module turns the three spectral-index channels into a probability
distribution over the 48 neighbor pixels: per-head softmax with the
center masked out, head averaging, Gaussian distance modulation, and a
final renormalization.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch
from .grids import CH_NDBI, CH_NDVI, CH_NDWI, PATCH_MARGIN, PATCH_SIZE, ChannelStats

INDEX_CHANNEL_SLICE = slice(CH_NDVI, CH_NDBI + 1)
CENTER_FLAT = PATCH_MARGIN * PATCH_SIZE + PATCH_MARGIN
N_PIXELS = PATCH_SIZE * PATCH_SIZE
CENTER_MASK_VALUE = -1e9


class ConvLayer:
    """Stride-1 same-size convolution with He-initialized weights.

    Channels-last: acts on (B, H, W, C_in), weights are (k, k, C_in, C_out).
    Output heads use zero_init so the network starts at the denormalization
    offset (and the attention at uniform weights), which keeps the physics
    term sane before the supervised fit takes hold.
    """

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 dtype=np.float32, zero_init: bool = False):
        if zero_init:
            weight = np.zeros((k, k, c_in, c_out))
        else:
            std = math.sqrt(2.0 / (c_in * k * k))
            weight = rng.normal(0.0, std, (k, k, c_in, c_out))
        self.weight = Tensor(weight, requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias)

    def named(self, prefix: str) -> dict:
        return {f"{prefix}/weight": self.weight, f"{prefix}/bias": self.bias}


class ResidualBlock:
    """Two 3x3 convs on a skip path: out = x + conv2(relu(conv1(x))).

    Zeroing both convs makes the block the exact identity.
    """

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float32):
        self.conv1 = ConvLayer(width, width, 3, rng, dtype)
        self.conv2 = ConvLayer(width, width, 3, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(ad.relu(self.conv1(x)))

    def named(self, prefix: str) -> dict:
        out = self.conv1.named(f"{prefix}/conv1")
        out.update(self.conv2.named(f"{prefix}/conv2"))
        return out


class SpycerNet:
    """Residual CNN producing a dense 7x7 NSAT prediction per patch."""

    def __init__(self, rng: np.random.Generator, in_channels: int = 8,
                 width: int = 32, n_blocks: int = 3,
                 target_mean: float = 0.0, target_std: float = 1.0,
                 dtype=np.float32):
        self.in_channels = in_channels
        self.width = width
        self.n_blocks = n_blocks
        self.target_mean = float(target_mean)
        self.target_std = float(target_std)
        self.dtype = dtype
        self.stem = ConvLayer(in_channels, width, 3, rng, dtype)
        self.blocks = [ResidualBlock(width, rng, dtype) for _ in range(n_blocks)]
        self.head = ConvLayer(width, 1, 1, rng, dtype, zero_init=True)

    def forward(self, x) -> Tensor:
        """Normalized (B, 8, 7, 7) input to (B, 7, 7) NSAT map in degC.

        Input arrives channels-first (the patch layout) and is moved to the
        channels-last layout the convolution kernels use.
        """
        if isinstance(x, Tensor):
            arr = x.data
        else:
            arr = np.asarray(x, dtype=self.dtype)
        if arr.ndim != 4 or arr.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"expected (B, {self.in_channels}, {PATCH_SIZE}, {PATCH_SIZE}), "
                f"got {arr.shape}"
            )
        x = Tensor(np.ascontiguousarray(arr.transpose(0, 2, 3, 1), dtype=self.dtype))
        h = ad.relu(self.stem(x))
        for block in self.blocks:
            h = block(h)
        out = self.head(h)[:, :, :, 0]
        return out * self.target_std + self.target_mean

    def parameters(self) -> dict:
        params = self.stem.named("net/stem")
        for i, block in enumerate(self.blocks):
            params.update(block.named(f"net/block{i}"))
        params.update(self.head.named("net/head"))
        return params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


def gaussian_kernel(sigma: float, dtype=np.float64) -> np.ndarray:
    """7x7 spatial decay factors exp(-(dx^2+dy^2) / (2 sigma^2)), center 1."""
    offsets = np.arange(PATCH_SIZE) - PATCH_MARGIN
    d2 = offsets[:, None] ** 2 + offsets[None, :] ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma)).astype(dtype)


class AttentionModule:
    """Multi-head convolutional attention over the spectral-index channels.

    Each head is a tiny CNN (3x3 conv, relu, dropout, 1x1 conv) producing a
    scalar logit per pixel. Weights are softmax over the 48 neighbors with
    the center masked out, averaged across heads, optionally modulated by
    the Gaussian kernel and renormalized to sum to 1.
    """

    def __init__(self, rng: np.random.Generator, n_heads: int = 4,
                 hidden: int = 16, sigma: float = 1.5,
                 dropout_rate: float = 0.15, dtype=np.float32):
        self.n_heads = n_heads
        self.hidden = hidden
        self.sigma = float(sigma)
        self.dropout_rate = float(dropout_rate)
        self.dtype = dtype
        self.heads = [
            (ConvLayer(3, hidden, 3, rng, dtype),
             ConvLayer(hidden, 1, 1, rng, dtype, zero_init=True))
            for _ in range(n_heads)
        ]
        self._gauss = gaussian_kernel(sigma, dtype)

    def logits(self, indices, train: bool = False,
               rng: np.random.Generator | None = None) -> list:
        """Per-head (B, 7, 7) logit maps from (B, 3, 7, 7) index channels."""
        arr = indices.data if isinstance(indices, Tensor) else np.asarray(indices, dtype=self.dtype)
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ShapeMismatch(f"expected (B, 3, 7, 7) index channels, got {arr.shape}")
        x = Tensor(np.ascontiguousarray(arr.transpose(0, 2, 3, 1), dtype=self.dtype))
        out = []
        for conv1, conv2 in self.heads:
            h = ad.relu(conv1(x))
            h = ad.dropout(h, self.dropout_rate, train, rng=rng)
            out.append(conv2(h)[:, :, :, 0])
        return out

    def weights(self, indices, train: bool = False,
                rng: np.random.Generator | None = None,
                use_gaussian: bool = True) -> Tensor:
        """(B, 7, 7) neighbor weights: non-negative, center 0, sum 1."""
        head_logits = self.logits(indices, train=train, rng=rng)
        b = head_logits[0].shape[0]
        mask = np.zeros(N_PIXELS, dtype=self.dtype)
        mask[CENTER_FLAT] = CENTER_MASK_VALUE

        averaged = None
        for logit in head_logits:
            flat = ad.reshape(logit, (b, N_PIXELS)) + Tensor(mask)
            probs = ad.softmax(flat, axis=-1)
            averaged = probs if averaged is None else averaged + probs
        w = averaged * (1.0 / self.n_heads)
        w = ad.reshape(w, (b, PATCH_SIZE, PATCH_SIZE))
        if use_gaussian:
            w = w * Tensor(self._gauss)
            total = ad.tsum(w, axis=(1, 2), keepdims=True)
            w = w / total
        return w

    def parameters(self) -> dict:
        params = {}
        for i, (conv1, conv2) in enumerate(self.heads):
            params.update(conv1.named(f"att/head{i}/conv1"))
            params.update(conv2.named(f"att/head{i}/conv2"))
        return params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


# ---------------------------------------------------------------------------
# checkpoint packing
# ---------------------------------------------------------------------------


def pack_model(net: SpycerNet, att: AttentionModule, stats: ChannelStats) -> dict:
    arrays = {name: p.data for name, p in net.parameters().items()}
    arrays.update({name: p.data for name, p in att.parameters().items()})
    arrays["stats/channel_mean"] = stats.mean
    arrays["stats/channel_std"] = stats.std
    arrays["stats/target"] = np.array([stats.target_mean, stats.target_std])
    arrays["meta/arch"] = np.array(
        [net.in_channels, net.width, net.n_blocks, att.n_heads, att.hidden]
    )
    arrays["meta/attention"] = np.array([att.sigma, att.dropout_rate])
    return arrays


def unpack_model(arrays: dict, dtype=np.float32):
    """Rebuild (net, att, stats) from a checkpoint dictionary."""
    in_channels, width, n_blocks, n_heads, hidden = (
        int(v) for v in arrays["meta/arch"]
    )
    sigma, dropout_rate = (float(v) for v in arrays["meta/attention"])
    target_mean, target_std = (float(v) for v in arrays["stats/target"])
    stats = ChannelStats(
        mean=arrays["stats/channel_mean"].astype(np.float64),
        std=arrays["stats/channel_std"].astype(np.float64),
        target_mean=target_mean,
        target_std=target_std,
    )
    rng = np.random.default_rng(0)  # immediately overwritten
    net = SpycerNet(rng, in_channels, width, n_blocks,
                    target_mean, target_std, dtype)
    att = AttentionModule(rng, n_heads, hidden, sigma, dropout_rate, dtype)
    for name, param in {**net.parameters(), **att.parameters()}.items():
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter {name}")
        if arrays[name].shape != param.data.shape:
            raise ValueError(
                f"checkpoint parameter {name} has shape {arrays[name].shape}, "
                f"expected {param.data.shape}"
            )
        param.data = arrays[name].astype(dtype)
    return net, att, stats
