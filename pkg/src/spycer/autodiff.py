"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Just enough machinery for small convolutional nets on 7x7 patches and an
MLP regressor: elementwise arithmetic with numpy-style broadcasting,
2-D matmul, stride-1 zero-padded conv2d, relu, softmax, reductions,
dropout, basic slicing, Adam, and a binary checkpoint format.

Tensors default to float32; gradient checks run the same graphs in
float64 by constructing parameters and inputs with dtype=np.float64.
Everything is single-threaded and deterministic; distinct graphs can be
evaluated concurrently since there is no shared mutable state.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import NotScalar, ShapeMismatch

DEFAULT_DTYPE = np.float32


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A dense array plus the links needed for the backward pass."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may alias a child's grad buffer
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _needs_graph(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if backward is not None and _needs_graph(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """Ordered record of the operations reachable from a root tensor.

    Forward execution orders nodes topologically; the tape recovers that
    order by depth-first search and replays it exactly reversed.
    """

    def __init__(self, root: Tensor):
        self.nodes: list[Tensor] = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def run_backward(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Tensor) -> None:
    """Populate .grad with d(loss)/d(tensor) for every tensor in the graph.

    Gradients accumulate additively: call zero_grad on parameters between
    steps.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward expects a scalar loss, got shape {loss.shape}")
    Tape(loss).run_backward(loss)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from exc

    def bw(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a.accumulate(-g)

    return _make(-a.data, (a,), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}") from exc

    def bw(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from exc

    def bw(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bw)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise ShapeMismatch(f"div: {a.shape} vs {b.shape}") from exc

    def bw(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad or a._parents:
            a.accumulate(g @ b.data.T)
        if b.requires_grad or b._parents:
            b.accumulate(a.data.T @ g)

    return _make(data, (a, b), bw)


# When set (by gradient checks) to a list, relu records min |preactivation|
# so callers can resample inputs that sit too close to the kink.
RELU_MARGIN_TRACKER: list | None = None


def relu(a: Tensor) -> Tensor:
    if RELU_MARGIN_TRACKER is not None and a.data.size:
        RELU_MARGIN_TRACKER.append(float(np.min(np.abs(a.data))))
    mask = a.data > 0  # gradient at exactly 0 is defined as 0

    def bw(g):
        a.accumulate(g * mask)

    return _make(np.where(mask, a.data, 0), (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        a.accumulate(2.0 * g * a.data)

    return _make(a.data * a.data, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(gg, a.shape))

    return _make(data, (a,), bw)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        a.accumulate(np.full(a.shape, g / n, dtype=a.dtype))

    return _make(a.data.mean(), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        a.accumulate(s * (g - dot))

    return _make(s, (a,), bw)


def dropout(a: Tensor, rate: float, train: bool,
            rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout: kept activations scaled by 1/(1-rate) at train time.

    With train False (or rate 0) this is the identity. A precomputed keep
    mask can be supplied so several forward passes share the same draw.
    """
    if not train or rate == 0.0:
        return a
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mask is None:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng or a mask")
        mask = rng.random(a.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=a.dtype)
    keep = mask * scale

    def bw(g):
        a.accumulate(g * keep)

    return _make(a.data * keep, (a,), bw)


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _make(data, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        a.accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded stride-1 NHWC convolution as k*k accumulated matmuls.

    Batched matmul on the shifted padded views avoids explicit im2col
    copies, which dominate runtime at these patch sizes.
    """
    b, h, wd, c_in = x.shape
    k = w.shape[0]
    if k == 1:
        return (x.reshape(b * h * wd, c_in) @ w[0, 0]).reshape(b, h, wd, -1)
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.matmul(xp[:, 0:h, 0:wd, :], w[0, 0])
    for i in range(k):
        for j in range(k):
            if i == 0 and j == 0:
                continue
            out += np.matmul(xp[:, i:i + h, j:j + wd, :], w[i, j])
    return out


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """d(loss)/d(weight): batched per-position gemms after one transpose."""
    b, h, wd, c_in = x.shape
    c_out = g.shape[3]
    if k == 1:
        dw = x.reshape(b * h * wd, c_in).T @ g.reshape(b * h * wd, c_out)
        return dw.reshape(1, 1, c_in, c_out)
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    xp_t = np.ascontiguousarray(xp.transpose(1, 2, 3, 0))  # (Hp, Wp, C_in, B)
    g_t = np.ascontiguousarray(g.transpose(1, 2, 0, 3))    # (H, W, B, C_out)
    dw = np.empty((k, k, c_in, c_out), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            dw[i, j] = np.matmul(xp_t[i:i + h, j:j + wd], g_t).sum(axis=(0, 1))
    return dw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero padding that preserves H and W.

    Channels-last layout: x is (B, H, W, C_in), weight (k, k, C_in, C_out)
    with k odd, bias (C_out,) or None.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeMismatch(
            f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}"
        )
    b, h, w, c_in = x.shape
    k, k2, c_in_w, c_out = weight.shape
    if c_in != c_in_w or k != k2 or k % 2 == 0:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")

    out = _conv_forward(x.data, weight.data)
    if bias is not None:
        out += bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if weight.requires_grad or weight._parents:
            weight.accumulate(_conv_weight_grad(x.data, g, k))
        if bias is not None and (bias.requires_grad or bias._parents):
            bias.accumulate(g.reshape(b * h * w, c_out).sum(axis=0))
        if x.requires_grad or x._parents:
            # input gradient is the same convolution of g with the
            # spatially flipped, channel-transposed kernel
            w_flip = np.ascontiguousarray(
                weight.data[::-1, ::-1].transpose(0, 1, 3, 2)
            )
            x.accumulate(_conv_forward(g, w_flip))

    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction over a named parameter group."""

    def __init__(self, params: dict, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPYC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_arrays: dict) -> None:
    """Write named float32 arrays: magic, version, count, then per entry
    name length + UTF-8 name, rank + dims (u32 little-endian), f32 payload.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named_arrays)))
        for name, arr in named_arrays.items():
            data = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims)
        offset += 4 * n
        out[name] = arr.copy()
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return out
