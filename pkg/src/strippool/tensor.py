"""Dense NCHW arrays and a small define-by-run reverse-mode autodiff engine.

Values are plain numpy arrays (float32 by default). Every op is dtype
polymorphic so gradient checks can run in float64 on the same code path.
"""

from __future__ import annotations

import contextlib
import functools
import zlib

import numpy as np

DTYPE = np.float32

_grad_enabled = True
_kink_log: list | None = None


class ConfigError(ValueError):
    """Raised for shape or configuration mismatches."""


@contextlib.contextmanager
def record_kinks():
    """Collect the activation pattern of every relu evaluated inside the block."""
    global _kink_log
    prev = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """A graph vertex: value, accumulated grad, parents and a backward rule."""

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_rule=None, requires_grad=False, name=None):
        self.value = np.asarray(value)
        if self.value.dtype.kind != "f":
            self.value = self.value.astype(DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_rule = backward_rule
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def param(value, name=None) -> Node:
    return Node(np.asarray(value, dtype=DTYPE), requires_grad=True, name=name)


def const(value) -> Node:
    return Node(value)


def _make(value, parents, rule) -> Node:
    """Create an op output; only records the tape when some parent needs grad."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, parents, rule, requires_grad=True)
    return Node(value)


def _accumulate(node: Node, g):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=node.value.dtype, copy=True)
    else:
        node.grad += g


def backward(loss: Node):
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node."""
    if loss.value.size != 1:
        raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # interior grads are transient; leaves keep accumulating across calls
    upstream = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node.backward_rule is None:
            _accumulate(node, g)
            continue
        for p, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.backward_rule is None:
                _accumulate(p, pg)
            elif id(p) in upstream:
                upstream[id(p)] = upstream[id(p)] + pg
            else:
                upstream[id(p)] = pg


# ----------------------------------------------------------------------------
# elementwise


def _broadcast_shape(a, b, op):
    if a == b:
        return a
    if len(a) != len(b) or any(x != y and x != 1 and y != 1 for x, y in zip(a, b)):
        raise ConfigError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(max(x, y) for x, y in zip(a, b))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Node, b: Node) -> Node:
    """Sum with same-rank singleton broadcasting (e.g. [N,C,H,1] + [N,C,1,W])."""
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value

    def rule(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(av * bv, (a, b), rule)


def scale(a: Node, s: float) -> Node:
    return _make(a.value * a.value.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def relu(a: Node) -> Node:
    out = np.maximum(a.value, 0)
    if _kink_log is not None:
        _kink_log.append(np.packbits(a.value > 0).tobytes())
    return _make(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a: Node) -> Node:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def concat_channels(a: Node, b: Node) -> Node:
    if a.value.ndim != b.value.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ConfigError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    return _make(
        np.concatenate([a.value, b.value], axis=1), (a, b), lambda g: (g[:, :ca], g[:, ca:])
    )


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_all(a: Node) -> Node:
    shape = a.shape
    return _make(a.value.sum(dtype=np.float64).astype(a.value.dtype).reshape(1),
                 (a,), lambda g: (np.broadcast_to(g.reshape(()), shape),))


def mean_all(a: Node) -> Node:
    return scale(sum_all(a), 1.0 / a.value.size)


def broadcast_to(a: Node, shape) -> Node:
    """Materialise a singleton-axis broadcast (parameter-free expansion)."""
    _broadcast_shape(a.shape, tuple(shape), "broadcast_to")
    old = a.shape
    return _make(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


# ----------------------------------------------------------------------------
# convolutions


def conv_out_size(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _weight_grad(g, cols, shape):
    # g [N,O,L], cols [N,K,L] -> [O,K]; summed per sample in a fixed order
    return np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(shape)


def conv2d(x: Node, w: Node, b: Node | None = None, stride=1, padding=0, dilation=1) -> Node:
    """2-D cross-correlation via shifted-slice im2col and one batched matmul."""
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ConfigError(f"conv2d: expected rank-4 input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ConfigError(f"conv2d: input {x.shape} has {c} channels but weight {w.shape} expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be odd, got {kh}x{kw}")
    ho = conv_out_size(h, kh, stride, padding, dilation)
    wo = conv_out_size(wd, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: empty output for input {x.shape}, kernel {w.shape}")
    xv = x.value
    wmat = w.value.reshape(o, -1)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xv.reshape(n, c, h * wd)
    else:
        xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=xv.dtype)
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                cols[:, :, i, j] = xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                                      c0:c0 + stride * (wo - 1) + 1:stride]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.value.reshape(1, o, 1)
    out = out.reshape(n, o, ho, wo)

    def rule(g):
        g = g.reshape(n, o, ho * wo)
        dw = _weight_grad(g, cols, w.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g)
            if pointwise:
                dx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(n, c, kh, kw, ho, wo)
                dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        r0, c0 = i * dilation, j * dilation
                        dxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                            c0:c0 + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
                dx = dxp[:, :, padding:padding + h, padding:padding + wd]
        return (dx, dw) if b is None else (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, rule)


def conv1d_along(x: Node, w: Node, b: Node | None = None, padding=None) -> Node:
    """1-D cross-correlation over the last axis of [N,C,L]; all channels mix."""
    if x.value.ndim != 3 or w.value.ndim != 3:
        raise ConfigError(f"conv1d_along: expected [N,C,L] input and [C,C,k] weight, got {x.shape} and {w.shape}")
    n, c, length = x.shape
    o, cw, k = w.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d_along: kernel size must be odd, got {k}")
    if c != cw:
        raise ConfigError(f"conv1d_along: input {x.shape} has {c} channels but weight {w.shape} expects {cw}")
    if padding is None:
        padding = (k - 1) // 2
    lo = length + 2 * padding - k + 1
    xv = x.value
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding))) if padding else xv
    cols = np.empty((n, c, k, lo), dtype=xv.dtype)
    for i in range(k):
        cols[:, :, i] = xp[:, :, i:i + lo]
    cols = cols.reshape(n, c * k, lo)
    wmat = w.value.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.value.reshape(1, o, 1)

    def rule(g):
        dw = _weight_grad(g, cols, w.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g).reshape(n, c, k, lo)
            dxp = np.zeros((n, c, length + 2 * padding), dtype=g.dtype)
            for i in range(k):
                dxp[:, :, i:i + lo] += dcols[:, :, i]
            dx = dxp[:, :, padding:padding + length]
        return (dx, dw) if b is None else (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, rule)


# ----------------------------------------------------------------------------
# normalisation


class RunningStats:
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Node, gamma: Node, beta: Node, stats: RunningStats, train: bool) -> Node:
    """Per-channel batch normalisation over every axis except 1 (rank 3 or 4)."""
    xv = x.value
    axes = (0,) + tuple(range(2, xv.ndim))
    bshape = (1, -1) + (1,) * (xv.ndim - 2)
    m = xv.size // xv.shape[1]
    if train:
        if m < 2:
            raise ConfigError(f"batchnorm2d: train mode needs N*H*W >= 2, got input {x.shape}")
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        mom = stats.momentum
        stats.mean = ((1 - mom) * stats.mean + mom * mean).astype(stats.mean.dtype)
        # biased, matching what train mode divides by; tiny extents make m/(m-1) large
        stats.var = ((1 - mom) * stats.var + mom * var).astype(stats.var.dtype)
    else:
        mean = stats.mean.astype(xv.dtype)
        var = stats.var.astype(xv.dtype)
    inv_std = (1.0 / np.sqrt(var + stats.eps)).astype(xv.dtype)
    xhat = (xv - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.value.reshape(bshape) + beta.value.reshape(bshape)

    def rule(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.value.reshape(bshape)
        if train:
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), rule)


# ----------------------------------------------------------------------------
# resampling


def interp_matrix(out_size: int, in_size: int, dtype=DTYPE) -> np.ndarray:
    """Half-pixel-centre linear interpolation weights, shape (out_size, in_size)."""
    return _interp_matrix(out_size, in_size, np.dtype(dtype).str)


@functools.lru_cache(maxsize=256)
def _interp_matrix(out_size, in_size, dtype):
    m = np.zeros((out_size, in_size), dtype=np.float64)
    s = in_size / out_size
    for d in range(out_size):
        src = min(max((d + 0.5) * s - 0.5, 0.0), in_size - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        t = src - i0
        m[d, i0] += 1.0 - t
        m[d, i1] += t
    m = m.astype(dtype)
    m.flags.writeable = False
    return m


def bilinear_upsample(x: Node, out_h: int, out_w: int) -> Node:
    """Separable bilinear resize (align_corners=False); also valid for shrinking."""
    if x.value.ndim != 4:
        raise ConfigError(f"bilinear_upsample: expected rank-4 input, got {x.shape}")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return _make(x.value.copy(), (x,), lambda g: (g,))
    ah = interp_matrix(out_h, h, x.value.dtype)
    aw = interp_matrix(out_w, w, x.value.dtype)
    out = np.matmul(np.matmul(ah, x.value), aw.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


# ----------------------------------------------------------------------------
# loss


def cross_entropy(logits: Node, labels: np.ndarray, ignore_index=255) -> Node:
    """Mean softmax cross-entropy over non-ignored pixels of [N,K,H,W] logits."""
    z = logits.value
    if labels.shape != (z.shape[0],) + z.shape[2:]:
        raise ConfigError(f"cross_entropy: logits {z.shape} and labels {labels.shape} are not aligned")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ConfigError("cross_entropy: every pixel is ignore-labelled")
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum(dtype=np.float64) / count

    def rule(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        d = (p - onehot) * valid[:, None] * (g.reshape(()) / count)
        return (d.astype(z.dtype),)

    return _make(np.array([loss], dtype=z.dtype), (logits,), rule)


# ----------------------------------------------------------------------------
# optimisation and initialisation


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """In-place momentum SGD. ``velocity`` maps id(param) -> buffer and is mutated."""
    if velocity is None:
        velocity = {}
    for p in params:
        if p.grad is None:
            continue
        step = p.grad + weight_decay * p.value
        v = velocity.get(id(p))
        if v is None or momentum == 0.0:
            v = step.astype(p.value.dtype)
        else:
            v = momentum * v + step
        velocity[id(p)] = v
        p.value = (p.value - lr * v).astype(p.value.dtype)
    return velocity


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Stream keyed by (seed, name) so a parameter's init ignores what else exists."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)
