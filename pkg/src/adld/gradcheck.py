"""Finite-difference checks for every differentiable op and composed stacks.

Each check builds a well-conditioned scalar head around one op and compares
the tape gradient against central differences (eps 1e-2, float32 forward).
Conditioning matters: float32 quantization of the scalar puts a noise floor
under the numeric derivative, so heads are l2 distances to a nearby signed
target (keeps the scalar small) and test points are redrawn until every
gradient component clears the floor.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

EPS = 1e-2
TOLERANCE = 1e-3


def _uniform(rng, lo, hi, shape):
    return rng.uniform(lo, hi, size=shape).astype(np.float32)


def _signed_pattern(rng, shape, magnitude=0.25):
    return (rng.integers(0, 2, size=shape).astype(np.float32) * 2.0 - 1.0) * magnitude


def _l2_head(forward, x0, rng, attempts=12, floor_ratio=2e-2):
    """One head f(x) = l2_mean(forward(x), t) with t chosen near forward(x0).

    The target is redrawn a few times looking for one whose gradient at x0
    has no component much smaller than the largest; small components sit at
    the float32 finite-difference noise floor.
    """
    out0 = forward(x0).data
    best = None
    for _ in range(attempts):
        t = out0 + _signed_pattern(rng, out0.shape, magnitude=0.1)

        def f(x, t=t):
            return T.reduce(forward(x), T.Tensor(t), "l2_mean")

        probe = T.Tensor(x0.data.copy(), requires_grad=True)
        with T.Tape() as tape:
            T.backward(f(probe), tape)
        g = np.zeros(x0.shape) if probe.grad is None else np.abs(probe.grad)
        gmax = g.max()
        score = g.min() / gmax if gmax > 0 else 0.0
        if best is None or score > best[0]:
            best = (score, f)
        if gmax > 0 and g.min() >= floor_ratio * gmax:
            return f
    return best[1]


def _fd_error_per_element(f, x: T.Tensor, eps: float = EPS) -> np.ndarray:
    """Per-element relative error of central differences vs the tape gradient."""
    x.requires_grad = True
    x.zero_grad()
    with T.Tape() as tape:
        T.backward(f(x), tape)
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
    return np.abs(analytic - numeric) / denom


def _check(forward, x0, rng, heads=4):
    """Max-over-elements of the min-over-heads finite-difference error.

    A wrong backward rule disagrees with central differences on the large
    gradient components of every head; a component sitting at the float32
    noise floor of one head is well conditioned under another.  Taking the
    per-element minimum across independent heads screens out the noise
    without masking real defects.
    """
    per_head = []
    for _ in range(heads):
        f = _l2_head(forward, x0, rng)
        per_head.append(_fd_error_per_element(f, T.Tensor(x0.data.copy()), EPS))
    return float(np.minimum.reduce(per_head).max())


# ---------------------------------------------------------------------------
# Per-op checks.  Each takes a seed and returns the max relative error.


def check_conv2d_input(seed):
    rng = np.random.default_rng(seed)
    w = T.Tensor(_uniform(rng, 0.2, 0.8, (3, 2, 3, 3)))
    b = T.Tensor(_uniform(rng, -0.3, 0.3, (3,)))
    x0 = T.Tensor(_uniform(rng, 0.2, 0.8, (1, 2, 5, 5)))
    return _check(lambda x: T.conv2d(x, w, b), x0, rng)


def check_conv2d_weight(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(_uniform(rng, 0.2, 0.8, (1, 2, 5, 5)))
    b = T.Tensor(_uniform(rng, -0.3, 0.3, (3,)))
    w0 = T.Tensor(_uniform(rng, 0.2, 0.8, (3, 2, 3, 3)))
    return _check(lambda w: T.conv2d(x, w, b), w0, rng)


def check_conv2d_bias(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(_uniform(rng, 0.2, 0.8, (1, 2, 5, 5)))
    w = T.Tensor(_uniform(rng, 0.2, 0.8, (3, 2, 3, 3)))
    b0 = T.Tensor(_uniform(rng, -0.3, 0.3, (3,)))
    return _check(lambda b: T.conv2d(x, w, b), b0, rng)


def check_conv2d_stride2(seed):
    # stride-2 leaves some pixels touching a single tap, so give the head
    # several output channels to sum over and extra heads to screen noise
    rng = np.random.default_rng(seed)
    w = T.Tensor(_uniform(rng, 0.2, 0.8, (4, 2, 3, 3)))
    b = T.Tensor(_uniform(rng, -0.3, 0.3, (4,)))
    x0 = T.Tensor(_uniform(rng, 0.2, 0.8, (1, 2, 7, 7)))
    return _check(lambda x: T.conv2d(x, w, b, stride=2, pad=1), x0, rng, heads=6)


def check_avg_pool(seed):
    rng = np.random.default_rng(seed)
    x0 = T.Tensor(_uniform(rng, -0.8, 0.8, (1, 2, 4, 4)))
    return _check(T.avg_pool2x2, x0, rng)


def check_global_avg_pool(seed):
    rng = np.random.default_rng(seed)
    x0 = T.Tensor(_uniform(rng, -0.8, 0.8, (2, 3, 4, 4)))
    return _check(T.global_avg_pool, x0, rng)


def check_batch_norm(seed):
    # bounded draws avoid standardized outliers whose projected gradient
    # crosses zero under most heads
    rng = np.random.default_rng(seed)
    gamma = T.Tensor(_uniform(rng, 0.6, 1.4, (2,)))
    beta = T.Tensor(_uniform(rng, -0.3, 0.3, (2,)))
    x0 = T.Tensor(_uniform(rng, -1.5, 1.5, (2, 2, 3, 3)))
    return _check(lambda x: T.normalize(x, "batch", gamma, beta), x0, rng, heads=6)


def check_batch_norm_affine(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))
    beta = T.Tensor(_uniform(rng, -0.3, 0.3, (2,)))
    g0 = T.Tensor(_uniform(rng, 0.6, 1.4, (2,)))
    err = _check(lambda g: T.normalize(x, "batch", g, beta), g0, rng)
    b0 = T.Tensor(_uniform(rng, -0.3, 0.3, (2,)))
    gamma = T.Tensor(_uniform(rng, 0.6, 1.4, (2,)))
    err2 = _check(lambda b: T.normalize(x, "batch", gamma, b), b0, rng)
    return max(err, err2)


def check_instance_norm(seed):
    rng = np.random.default_rng(seed)
    gamma = T.Tensor(_uniform(rng, 0.6, 1.4, (2,)))
    beta = T.Tensor(_uniform(rng, -0.3, 0.3, (2,)))
    x0 = T.Tensor(_uniform(rng, -1.5, 1.5, (2, 2, 3, 3)))
    return _check(lambda x: T.normalize(x, "instance", gamma, beta), x0, rng, heads=10)


def check_prelu(seed):
    rng = np.random.default_rng(seed)
    slope = T.Tensor(_uniform(rng, 0.15, 0.45, (2,)))
    raw = _uniform(rng, 0.3, 1.0, (1, 2, 4, 4))
    signs = np.where(np.arange(raw.size).reshape(raw.shape) % 2 == 0, 1.0, -1.0).astype(np.float32)
    x0 = T.Tensor(raw * signs)  # off the kink; half negative so the slope gradient is exercised
    err = _check(lambda x: T.activate(x, "prelu", slope), x0, rng)
    x = T.Tensor(raw * signs)
    s0 = T.Tensor(_uniform(rng, 0.15, 0.45, (2,)))
    err2 = _check(lambda s: T.activate(x, "prelu", s), s0, rng)
    return max(err, err2)


def check_tanh(seed):
    rng = np.random.default_rng(seed)
    x0 = T.Tensor(_uniform(rng, -1.0, 1.0, (2, 8)))
    return _check(lambda x: T.activate(x, "tanh"), x0, rng)


def check_sigmoid(seed):
    rng = np.random.default_rng(seed)
    x0 = T.Tensor(_uniform(rng, -1.2, 1.2, (2, 8)))
    return _check(lambda x: T.activate(x, "sigmoid"), x0, rng)


def check_spatial_softmax(seed):
    rng = np.random.default_rng(seed)
    x0 = T.Tensor(_uniform(rng, -0.5, 0.5, (1, 2, 3, 3)))
    return _check(T.spatial_softmax, x0, rng)


def check_linear(seed):
    rng = np.random.default_rng(seed)
    w = T.Tensor(_uniform(rng, 0.2, 0.8, (3, 4)))
    b = T.Tensor(_uniform(rng, -0.3, 0.3, (3,)))
    x0 = T.Tensor(_uniform(rng, 0.2, 0.8, (2, 4)))
    err = _check(lambda x: T.linear(x, w, b), x0, rng)
    x = T.Tensor(_uniform(rng, 0.2, 0.8, (2, 4)))
    w0 = T.Tensor(_uniform(rng, 0.2, 0.8, (3, 4)))
    err2 = _check(lambda ww: T.linear(x, ww, b), w0, rng)
    return max(err, err2)


def check_concat_channels(seed):
    rng = np.random.default_rng(seed)
    other = T.Tensor(_uniform(rng, -0.8, 0.8, (1, 3, 3, 3)))
    x0 = T.Tensor(_uniform(rng, -0.8, 0.8, (1, 2, 3, 3)))
    err = _check(lambda x: T.concat_channels(x, other), x0, rng)
    err2 = _check(lambda x: T.concat_channels(other, x), x0, rng)
    return max(err, err2)


def check_channel_sum(seed):
    rng = np.random.default_rng(seed)
    x0 = T.Tensor(_uniform(rng, -0.8, 0.8, (1, 4, 3, 3)))
    return _check(T.channel_sum, x0, rng)


def check_elementwise_sum(seed):
    rng = np.random.default_rng(seed)
    others = [T.Tensor(_uniform(rng, -0.8, 0.8, (2, 5))) for _ in range(2)]
    x0 = T.Tensor(_uniform(rng, -0.8, 0.8, (2, 5)))
    return _check(lambda x: T.elementwise_sum([x, *others]), x0, rng)


def check_l1_mean(seed):
    rng = np.random.default_rng(seed)
    b = T.Tensor(_uniform(rng, -0.8, 0.8, (2, 8)))
    shift = _signed_pattern(rng, (2, 8), magnitude=1.0) * _uniform(rng, 0.3, 0.8, (2, 8))
    x0 = T.Tensor(b.data + shift)  # |a-b| bounded away from the kink
    return T.finite_diff_check(lambda x: T.reduce(x, b, "l1_mean"), x0, EPS)


def check_l2_mean(seed):
    rng = np.random.default_rng(seed)
    b = T.Tensor(_uniform(rng, -0.8, 0.8, (2, 8)))
    shift = _signed_pattern(rng, (2, 8), magnitude=1.0) * _uniform(rng, 0.3, 0.8, (2, 8))
    x0 = T.Tensor(b.data + shift)
    return T.finite_diff_check(lambda x: T.reduce(x, b, "l2_mean"), x0, EPS)


def check_stop_gradient(seed):
    # stop_gradient is not finite-difference checkable (its defined derivative
    # is zero while its value tracks the input); assert the contract exactly:
    # y = x + stop_gradient(x) has tape gradient exactly one.
    rng = np.random.default_rng(seed)
    x = T.Tensor(_uniform(rng, -0.8, 0.8, (2, 5)), requires_grad=True)
    with T.Tape() as tape:
        y = T.sum_all(T.elementwise_sum([x, T.stop_gradient(x)]))
        T.backward(y, tape)
    return 0.0 if np.array_equal(x.grad, np.ones_like(x.data)) else 1.0


def check_stack(seed, corrupt=False):
    """A randomly composed conv -> normalization -> activation stack.

    The composition pool is restricted to pairings whose curvature stays low
    enough for float32 central differences at eps 1e-2; kinds, shapes and
    values are all drawn from the seed.
    """
    rng = np.random.default_rng(seed)
    c_in = int(rng.integers(2, 4))
    c_mid = int(rng.integers(2, 5))
    side = int(rng.integers(5, 7))
    x0 = T.Tensor(rng.normal(scale=0.8, size=(1, c_in, side, side)).astype(np.float32))
    w = T.Tensor(_uniform(rng, 0.4, 1.0, (c_mid, c_in, 3, 3)) * _signed_pattern(rng, (c_mid, c_in, 3, 3), 1.0))
    b = T.Tensor(_uniform(rng, -0.2, 0.2, (c_mid,)))
    gamma = T.Tensor(_uniform(rng, 0.8, 1.2, (c_mid,)))
    beta = T.Tensor(_uniform(rng, -0.3, 0.3, (c_mid,)))
    norm_kind = ("instance", "batch")[int(rng.integers(0, 2))]
    act_kind = ("tanh", "sigmoid")[int(rng.integers(0, 2))]

    def forward(x):
        h = T.conv2d(x, w, b)
        if corrupt:
            h = _corrupted_tanh(h)
        h = T.normalize(h, norm_kind, gamma, beta)
        return T.activate(h, act_kind)

    return _check(forward, x0, rng)


def _corrupted_tanh(x):
    out = np.tanh(x.data)

    def bwd(dout, needs):
        return (dout * (1.0 - out),)  # deliberately wrong rule for the mutation test

    return T.apply_op(out, (x,), bwd)


CHECKS = {
    "conv2d_input": check_conv2d_input,
    "conv2d_weight": check_conv2d_weight,
    "conv2d_bias": check_conv2d_bias,
    "conv2d_stride2": check_conv2d_stride2,
    "avg_pool2x2": check_avg_pool,
    "global_avg_pool": check_global_avg_pool,
    "batch_norm": check_batch_norm,
    "batch_norm_affine": check_batch_norm_affine,
    "instance_norm": check_instance_norm,
    "prelu": check_prelu,
    "tanh": check_tanh,
    "sigmoid": check_sigmoid,
    "spatial_softmax": check_spatial_softmax,
    "linear": check_linear,
    "concat_channels": check_concat_channels,
    "channel_sum": check_channel_sum,
    "elementwise_sum": check_elementwise_sum,
    "l1_mean": check_l1_mean,
    "l2_mean": check_l2_mean,
    "stop_gradient": check_stop_gradient,
    "stack_a": lambda seed: check_stack(seed * 3 + 1),
    "stack_b": lambda seed: check_stack(seed * 3 + 2),
    "stack_c": lambda seed: check_stack(seed * 3 + 3),
}


def run_checks(ops=None, seeds=20, base_seed=0, corrupt=False) -> dict[str, float]:
    """Max relative error per op over ``seeds`` seeds starting at ``base_seed``."""
    names = list(CHECKS) if ops in (None, "all") else list(ops)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradcheck ops: {unknown}")
    results = {}
    for name in names:
        worst = 0.0
        for s in range(base_seed, base_seed + seeds):
            worst = max(worst, CHECKS[name](s))
        results[name] = worst
    if corrupt:
        worst = 0.0
        for s in range(base_seed, base_seed + seeds):
            worst = max(worst, check_stack(s, corrupt=True))
        results["corrupted_tanh"] = worst
    return results
