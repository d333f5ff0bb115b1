"""Dense float32 tensors with reverse-mode autodiff on an explicit tape.

Everything in this package computes on rank-<=4 tensors: scalars are rank-0,
AU logits are (batch, m), images and feature maps are (batch, channels,
height, width).  Operations record onto an explicit Tape; one training step
owns one tape and ``backward`` replays it in exact reverse recording order.

Loss-style reductions accumulate in float64 before being stored back as
float32 scalars, so batched losses agree with scalar-loop references to well
below 1e-6.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "FormatError",
    "BatchNormState",
    "apply_op",
    "conv2d",
    "avg_pool2x2",
    "normalize",
    "activate",
    "spatial_softmax",
    "global_avg_pool",
    "linear",
    "concat_channels",
    "concat_batch",
    "slice_batch",
    "channel_sum",
    "reduce",
    "elementwise_sum",
    "sum_all",
    "scale",
    "stop_gradient",
    "backward",
    "finite_diff_check",
    "write_adtn",
    "read_adtn",
]


class DimensionError(ValueError):
    """A shape precondition was violated; the message names the offending axes."""


class FormatError(ValueError):
    """A tensor container file is malformed."""


class Tensor:
    """Rank-<=4 float32 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim > 4:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum 4 (shape {arr.shape})")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tracked = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# Tape machinery


class Tape:
    """Ordered record of operations; backward replays it exactly reversed."""

    __slots__ = ("ops",)

    def __init__(self):
        # each entry: (output tensor, input tensors, backward fn, needs flags)
        self.ops: list[tuple] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.ops)


_ACTIVE: list[Tape] = []


def _active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def apply_op(out_data: np.ndarray, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    """Wrap ``out_data`` as a Tensor and record the op on the active tape.

    ``bwd(dout, needs)`` must return one gradient array (or None) per input;
    ``needs`` is a tuple of flags saying which inputs take part in backward.
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        needs = tuple(t.requires_grad or t._tracked for t in inputs)
        if any(needs):
            out._tracked = True
            tape.ops.append((out, tuple(inputs), bwd, needs))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Repeated calls without ``zero_grad`` accumulate.
    """
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise ValueError("backward needs an active or explicit Tape")
    if loss.size != 1:
        raise DimensionError(f"backward expects a scalar loss, got shape {loss.shape}")
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {}
    if loss.requires_grad:
        touched[id(loss)] = loss
    for out, inputs, bwd, needs in reversed(tape.ops):
        dout = flows.pop(id(out), None)
        if dout is None:
            continue
        grads = bwd(dout, needs)
        for t, g, need in zip(inputs, grads, needs):
            if not need or g is None:
                continue
            key = id(t)
            if key in flows:
                flows[key] = flows[key] + g
            else:
                flows[key] = g
            if t.requires_grad:
                touched[key] = t
    for key, t in touched.items():
        g = flows.get(key)
        if g is None:
            continue
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float32)
        else:
            t.grad = t.grad + g


# ---------------------------------------------------------------------------
# Layer operations


def _require_rank(t: Tensor, rank: int, name: str) -> None:
    if t.ndim != rank:
        raise DimensionError(f"{name} must be rank {rank}, got shape {t.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin,k,k) plus bias.

    Internally runs channels-last so each of the k*k taps is one dense GEMM;
    the padded channels-last input is kept for backward.
    """
    _require_rank(x, 4, "conv2d input")
    _require_rank(w, 4, "conv2d weight")
    bt, c, h, wdt = x.shape
    co, ci, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"conv2d kernel must be square, got axes 2/3 = {kh}x{kw}")
    k = kh
    if k % 2 == 0:
        raise DimensionError(f"conv2d kernel size must be odd, got {k} on axes 2/3")
    if ci != c:
        raise DimensionError(f"conv2d input channels (axis 1) = {c} do not match weight in-channels (axis 1) = {ci}")
    if b.shape != (co,):
        raise DimensionError(f"conv2d bias shape {b.shape} does not match out-channels (axis 0) = {co}")
    ho, rh = divmod(h + 2 * pad - k, stride)
    wo, rw = divmod(wdt + 2 * pad - k, stride)
    if rh or rw:
        raise DimensionError(
            f"conv2d output extents not integral: height axis gives ({h}+2*{pad}-{k})/{stride}, "
            f"width axis gives ({wdt}+2*{pad}-{k})/{stride}"
        )
    ho += 1
    wo += 1

    if pad:
        xp = np.zeros((bt, h + 2 * pad, wdt + 2 * pad, c), dtype=np.float32)
        xp[:, pad : pad + h, pad : pad + wdt, :] = x.data.transpose(0, 2, 3, 1)
    else:
        xp = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # (k,k,Cin,Cout)
    acc = np.zeros((bt * ho * wo, co), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            sl = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :].reshape(-1, c)
            acc += sl @ wk[i, j]
    acc += b.data
    out = np.ascontiguousarray(acc.reshape(bt, ho, wo, co).transpose(0, 3, 1, 2))

    def bwd(dout, needs):
        dcl = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, co)
        dx = dw = db = None
        if needs[2]:
            db = dcl.sum(axis=0)
        if needs[1]:
            dwk = np.empty((k, k, c, co), dtype=np.float32)
            for i in range(k):
                for j in range(k):
                    sl = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :].reshape(-1, c)
                    dwk[i, j] = (dcl.T @ sl).T
            dw = np.ascontiguousarray(dwk.transpose(3, 2, 0, 1))
        if needs[0]:
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    g = (dcl @ wk[i, j].T).reshape(bt, ho, wo, c)
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += g
            dx = np.ascontiguousarray(dxp[:, pad : pad + h, pad : pad + wdt, :].transpose(0, 3, 1, 2))
        return dx, dw, db

    return apply_op(out, (x, w, b), bwd)


def avg_pool2x2(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 windows."""
    _require_rank(x, 4, "avg_pool2x2 input")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2x2 needs even spatial extents, got height={h}, width={w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(dout, needs):
        g = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3)
        g *= 0.25
        return (g,)

    return apply_op(out, (x,), bwd)


class BatchNormState:
    """Running mean/variance for batch normalization in evaluation mode."""

    __slots__ = ("mean", "var", "momentum", "initialized")

    def __init__(self, channels: int, momentum: float = 0.9):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.initialized = False

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if not self.initialized:
            self.mean = mean.astype(np.float32)
            self.var = var.astype(np.float32)
            self.initialized = True
        else:
            m = self.momentum
            self.mean = m * self.mean + (1.0 - m) * mean.astype(np.float32)
            self.var = m * self.var + (1.0 - m) * var.astype(np.float32)


def normalize(
    x: Tensor,
    kind: str,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    state: BatchNormState | None = None,
    training: bool = True,
) -> Tensor:
    """Batch (per-channel over B,H,W) or instance (per sample-channel over H,W) normalization."""
    _require_rank(x, 4, "normalize input")
    if eps <= 0:
        raise ValueError(f"normalize eps must be positive, got {eps}")
    b, c, h, w = x.shape
    if h * w == 0:
        raise DimensionError(f"normalize got zero-size spatial field, shape {x.shape}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"normalize affine params must have shape ({c},), got {gamma.shape} and {beta.shape}")
    xd = x.data
    if kind == "batch":
        axes = (0, 2, 3)
        if training or state is None or not state.initialized:
            mean = xd.mean(axis=axes)
            var = xd.var(axis=axes)
            if training and state is not None:
                state.update(mean, var)
            batch_stats = True
        else:
            mean, var = state.mean, state.var
            batch_stats = False
        mean_b = mean[None, :, None, None]
        var_b = var[None, :, None, None]
        n = b * h * w
    elif kind == "instance":
        axes = (2, 3)
        mean_b = xd.mean(axis=axes, keepdims=True)
        var_b = xd.var(axis=axes, keepdims=True)
        batch_stats = True
        n = h * w
    else:
        raise ValueError(f"unknown normalization kind {kind!r}")

    inv = 1.0 / np.sqrt(var_b + np.float32(eps))
    xhat = (xd - mean_b) * inv
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(dout, needs):
        dx = dgamma = dbeta = None
        if needs[2]:
            dbeta = dout.sum(axis=(0, 2, 3))
        if needs[1]:
            dgamma = (dout * xhat).sum(axis=(0, 2, 3))
        if needs[0]:
            dxhat = dout * gamma.data[None, :, None, None]
            if batch_stats:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = inv * (dxhat - s1 / n - xhat * (s2 / n))
            else:
                dx = dxhat * inv
        return dx, dgamma, dbeta

    return apply_op(out, (x, gamma, beta), bwd)


def activate(x: Tensor, kind: str, slope: Tensor | None = None) -> Tensor:
    """Elementwise prelu / tanh / sigmoid."""
    xd = x.data
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a slope tensor")
        _require_rank(x, 4, "prelu input")
        c = x.shape[1]
        if slope.shape != (c,):
            raise DimensionError(f"prelu slope must have shape ({c},), got {slope.shape}")
        s_b = slope.data[None, :, None, None]
        out = np.where(xd >= 0, xd, xd * s_b)

        def bwd(dout, needs):
            dx = dslope = None
            if needs[0]:
                dx = np.where(xd >= 0, dout, dout * s_b)
            if needs[1]:
                dslope = (dout * np.where(xd < 0, xd, 0.0)).sum(axis=(0, 2, 3))
            return dx, dslope

        return apply_op(out, (x, slope), bwd)

    if kind == "tanh":
        out = np.tanh(xd)

        def bwd(dout, needs, out=out):
            return (dout * (1.0 - out * out),)

        return apply_op(out, (x,), bwd)

    if kind == "sigmoid":
        pos = xd >= 0
        z = np.exp(np.where(pos, -xd, xd))
        out = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))

        def bwd(dout, needs, out=out):
            return (dout * out * (1.0 - out),)

        return apply_op(out, (x,), bwd)

    raise ValueError(f"unknown activation kind {kind!r}")


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over the spatial positions of each (sample, channel) map."""
    _require_rank(x, 4, "spatial_softmax input")
    xd = x.data
    m = xd.max(axis=(2, 3), keepdims=True)
    e = np.exp(xd - m)
    out = e / e.sum(axis=(2, 3), keepdims=True)

    def bwd(dout, needs, out=out):
        s = (dout * out).sum(axis=(2, 3), keepdims=True)
        return (out * (dout - s),)

    return apply_op(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel, (B,C,H,W) -> (B,C)."""
    _require_rank(x, 4, "global_avg_pool input")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(dout, needs):
        g = np.broadcast_to(dout[:, :, None, None] / (h * w), (b, c, h, w))
        return (np.ascontiguousarray(g),)

    return apply_op(out, (x,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map (B,C) @ (O,C)^T + (O,)."""
    _require_rank(x, 2, "linear input")
    _require_rank(w, 2, "linear weight")
    bt, c = x.shape
    o, ci = w.shape
    if ci != c:
        raise DimensionError(f"linear input features (axis 1) = {c} do not match weight in-features (axis 1) = {ci}")
    if b.shape != (o,):
        raise DimensionError(f"linear bias shape {b.shape} does not match out-features (axis 0) = {o}")
    out = x.data @ w.data.T + b.data

    def bwd(dout, needs):
        dx = dw = db = None
        if needs[0]:
            dx = dout @ w.data
        if needs[1]:
            dw = dout.T @ x.data
        if needs[2]:
            db = dout.sum(axis=0)
        return dx, dw, db

    return apply_op(out, (x, w, b), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis 1); a's channels come first."""
    if a.ndim != b.ndim or a.ndim not in (2, 4):
        raise DimensionError(f"concat_channels needs two rank-2 or rank-4 tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels non-channel axes differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(dout, needs):
        da = dout[:, :ca] if needs[0] else None
        db = dout[:, ca:] if needs[1] else None
        return da, db

    return apply_op(out, (a, b), bwd)


def concat_batch(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the batch axis (axis 0)."""
    if a.shape[1:] != b.shape[1:]:
        raise DimensionError(f"concat_batch non-batch axes differ: {a.shape} vs {b.shape}")
    na = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def bwd(dout, needs):
        da = dout[:na] if needs[0] else None
        db = dout[na:] if needs[1] else None
        return da, db

    return apply_op(out, (a, b), bwd)


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along the batch axis."""
    if not (0 <= start <= stop <= x.shape[0]):
        raise DimensionError(f"slice_batch range [{start},{stop}) out of bounds for batch {x.shape[0]}")
    out = x.data[start:stop]

    def bwd(dout, needs):
        g = np.zeros_like(x.data)
        g[start:stop] = dout
        return (g,)

    return apply_op(out, (x,), bwd)


def channel_sum(x: Tensor) -> Tensor:
    """Elementwise sum over channels, (B,C,H,W) -> (B,1,H,W)."""
    _require_rank(x, 4, "channel_sum input")
    out = x.data.sum(axis=1, keepdims=True)

    def bwd(dout, needs):
        return (np.ascontiguousarray(np.broadcast_to(dout, x.shape)),)

    return apply_op(out, (x,), bwd)


def reduce(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Scalar mean absolute (l1_mean) or mean squared (l2_mean) difference."""
    if a.shape != b.shape:
        raise DimensionError(f"reduce shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    if kind == "l1_mean":
        out = np.float32(np.abs(diff).sum(dtype=np.float64) / n)

        def bwd(dout, needs):
            g = np.sign(diff) * (float(dout) / n)
            da = g if needs[0] else None
            db = -g if needs[1] else None
            return da, db

    elif kind == "l2_mean":
        out = np.float32(np.square(diff, dtype=np.float64).sum() / n)

        def bwd(dout, needs):
            g = diff * (2.0 * float(dout) / n)
            da = g if needs[0] else None
            db = -g if needs[1] else None
            return da, db

    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return apply_op(out, (a, b), bwd)


def elementwise_sum(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of a list of same-shape tensors."""
    if not tensors:
        raise ValueError("elementwise_sum needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"elementwise_sum shape mismatch: {shape} vs {t.shape}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data

    def bwd(dout, needs):
        return tuple(dout if need else None for need in needs)

    return apply_op(out, tuple(tensors), bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a rank-0 tensor."""
    out = np.float32(x.data.sum(dtype=np.float64))

    def bwd(dout, needs):
        return (np.full(x.shape, float(dout), dtype=np.float32),)

    return apply_op(out, (x,), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    cf = np.float32(c)
    out = x.data * cf

    def bwd(dout, needs):
        return (dout * cf,)

    return apply_op(out, (x,), bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical view that blocks gradient flow."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# Finite-difference oracle


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-2) -> float:
    """Max relative error between the tape gradient of f at x and central differences.

    ``f`` must be scalar-valued and deterministic.  The relative error uses
    denominator max(|analytic|, |numeric|, 1e-8) per element.
    """
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
        backward(out, tape)
    analytic = np.zeros(x.shape, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + np.float32(eps)
        fp = float(f(x).data)
        flat[idx] = orig - np.float32(eps)
        fm = float(f(x).data)
        flat[idx] = orig
        numeric[idx] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


# ---------------------------------------------------------------------------
# Tensor container file format (magic "ADTN")

_MAGIC = b"ADTN"
_VERSION = 1


def write_adtn(path, array) -> None:
    """Write a float32 tensor file: magic, version, rank, u32 extents, payload."""
    if isinstance(array, Tensor):
        array = array.data
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim > 4:
        raise DimensionError(f"rank {arr.ndim} exceeds 4")
    with open(path, "wb") as fh:
        fh.write(adtn_bytes(arr))


def adtn_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float32)
    header = _MAGIC + bytes([_VERSION, arr.ndim]) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4").tobytes()


def read_adtn(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    arr, _ = adtn_from_bytes(data, 0)
    return arr


def adtn_from_bytes(data: bytes, offset: int) -> tuple[np.ndarray, int]:
    """Parse one ADTN record at ``offset``; returns (array, next offset)."""
    if data[offset : offset + 4] != _MAGIC:
        raise FormatError(f"bad magic bytes {data[offset : offset + 4]!r} at offset {offset}, expected {_MAGIC!r}")
    version = data[offset + 4]
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}")
    rank = data[offset + 5]
    if rank > 4:
        raise FormatError(f"rank {rank} exceeds 4")
    pos = offset + 6
    extents = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    count = 1
    for e in extents:
        count *= e
    nbytes = count * 4
    if pos + nbytes > len(data):
        raise FormatError(f"payload truncated: need {nbytes} bytes at offset {pos}, have {len(data) - pos}")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(extents).copy()
    return arr, pos + nbytes
