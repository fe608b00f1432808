"""A small reverse-mode autodiff over numpy arrays.

Only the handful of operators the dual-branch network needs are provided,
each with a hand-written backward pass.  Tensors are ``(N, C, H, W)``.
"""
from __future__ import annotations

import contextlib

import numpy as np


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"


def const(value) -> Var:
    return Var(np.asarray(value))


def backward(root: Var, seed=None) -> None:
    """Accumulate gradients of ``root`` into every ancestor's ``.grad``."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value) if seed is None else seed
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None:
                continue
            p.grad = g if p.grad is None else p.grad + g


# ReLU sign patterns can be captured to detect kink crossings in finite differences
_relu_log: list | None = None


@contextlib.contextmanager
def record_relu_masks():
    global _relu_log
    prev, _relu_log = _relu_log, []
    try:
        yield _relu_log
    finally:
        _relu_log = prev


def conv2d(x: Var, w: Var, b: Var, stride: int = 1) -> Var:
    """'Same'-padded convolution (cross-correlation) with odd square kernels."""
    wv = w.value
    o, c, k, _ = wv.shape
    pad = k // 2
    xv = x.value
    n, _, h, wd = xv.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    # channel-last padded copy so every im2col slice is a cheap strided read
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=xv.dtype)
    xp[:, pad:pad + h, pad:pad + wd, :] = xv.transpose(0, 2, 3, 1)
    if stride == 1 and o < c:
        return _conv2d_taps(x, w, b, xp)
    cols = np.empty((n, ho, wo, k, k, c), dtype=xv.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    wmat = wv.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + b.value[None, :, None, None]

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3))
        gcols = (gmat @ wmat).reshape(n, ho, wo, k, k, c)
        gxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb

    return Var(np.ascontiguousarray(out), (x, w, b), back, "conv2d")


def _conv2d_taps(x: Var, w: Var, b: Var, xp: np.ndarray) -> Var:
    """Stride-1 path: one GEMM per pass, shifting the narrower output side instead of the input."""
    wv = w.value
    o, c, k, _ = wv.shape
    n, hp, wp, _ = xp.shape
    h, wd = hp - k + 1, wp - k + 1
    wt = wv.transpose(1, 2, 3, 0).reshape(c, k * k * o)
    z = (xp.reshape(-1, c) @ wt).reshape(n, hp, wp, k, k, o)
    out = z[:, :h, :wd, 0, 0, :].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                out += z[:, i:i + h, j:j + wd, i, j, :]
    out = out.transpose(0, 3, 1, 2) + b.value[None, :, None, None]
    pad = k // 2

    def back(g):
        gs = g.transpose(0, 2, 3, 1)
        big = np.zeros((n, hp, wp, k, k, o), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                big[:, i:i + h, j:j + wd, i, j, :] = gs
        big = big.reshape(-1, k * k * o)
        gw = (xp.reshape(-1, c).T @ big).reshape(c, k, k, o).transpose(3, 0, 1, 2)
        gxp = (big @ wt.T).reshape(n, hp, wp, c)
        gx = gxp[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw), g.sum(axis=(0, 2, 3))

    return Var(np.ascontiguousarray(out), (x, w, b), back, "conv2d")


def relu(x: Var) -> Var:
    mask = x.value > 0
    if _relu_log is not None:
        _relu_log.append(mask)
    return Var(x.value * mask, (x,), lambda g: (g * mask,), "relu")


def concat(xs: list[Var]) -> Var:
    if len(xs) == 1:
        return xs[0]
    sizes = np.cumsum([v.value.shape[1] for v in xs])[:-1]
    out = np.concatenate([v.value for v in xs], axis=1)
    return Var(out, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=1)), "concat")


def upsample2(x: Var) -> Var:
    out = x.value.repeat(2, axis=2).repeat(2, axis=3)

    def back(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return Var(out, (x,), back, "upsample2")


def spatial_dropout(x: Var, p: float, rng: np.random.Generator | None, training: bool) -> Var:
    """Drop whole channels with probability ``p`` (inverted scaling)."""
    if not training or p <= 0:
        return x
    n, c = x.value.shape[:2]
    keep = (rng.random((n, c, 1, 1)) >= p).astype(x.value.dtype) / (1.0 - p)
    return Var(x.value * keep, (x,), lambda g: (g * keep,), "dropout")


def softmax(x: Var) -> Var:
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Var(s, (x,), back, "softmax")


def linear_resize(x: Var, ry: np.ndarray, rx: np.ndarray) -> Var:
    """Per-sample separable linear map ``out[n] = ry[n] @ x[n] @ rx[n].T`` on the spatial axes."""
    out = np.einsum("nij,ncjk,nlk->ncil", ry, x.value, rx, optimize=True)

    def back(g):
        return (np.einsum("nij,ncil,nlk->ncjk", ry, g, rx, optimize=True),)

    return Var(out, (x,), back, "linear_resize")


def detach(x: Var) -> Var:
    return Var(x.value, (), None, "detach")


def dice_loss(pred: Var, target: np.ndarray, valid: np.ndarray | None = None, eps: float = 1e-6) -> Var:
    """Soft Dice, ``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`` per channel, averaged.

    Sums run over batch and space.  ``valid`` (``N, 1, H, W``) masks pixels
    out of the loss.
    """
    p = pred.value
    if p.shape != target.shape:
        raise ValueError(f"prediction {p.shape} and target {target.shape} differ")
    m = np.ones_like(p[:, :1]) if valid is None else valid.astype(p.dtype)
    axes = (0, 2, 3)
    inter = (p * target * m).sum(axis=axes)
    denom = (p * m).sum(axis=axes) + (target * m).sum(axis=axes) + eps
    num = 2 * inter + eps
    n_ch = p.shape[1]
    loss = float(np.mean(1.0 - num / denom))

    def back(g):
        # d/dp of -(num/denom) per channel
        a = (2 * target * denom[None, :, None, None] - num[None, :, None, None]) / denom[None, :, None, None] ** 2
        return (-g * a * m / n_ch,)

    return Var(np.asarray(loss, dtype=p.dtype), (pred,), back, "dice")


def add(a: Var, b: Var) -> Var:
    return Var(a.value + b.value, (a, b), lambda g: (g, g), "add")
