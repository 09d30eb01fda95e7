"""A small tensor-level reverse-mode autodiff engine over numpy arrays.

Each op builds a :class:`Tensor` that remembers its parents and a closure that
pushes ``out.grad`` back into them. Gradients stay full precision; the
quantizing ops use straight-through estimates.
"""

from __future__ import annotations

import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .layers import BNState, same_padding, softmax
from .quantizers import binarize_dense, round_half_away


class Tensor:
    __slots__ = ("data", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, data, parents=(), requires_grad=False, name=""):
        self.data = data
        self.grad = None
        self.parents = parents
        self._backward = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        return f"Tensor({self.name or 'anon'}, shape={self.data.shape})"


def param(data, name="") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def backward(loss: Tensor, params=()) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Parameters in ``params`` that the loss does not depend on get a zero
    gradient and a warning.
    """
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents if p.requires_grad)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for p in params:
        if p.grad is None:
            warnings.warn(f"parameter {p.name or p} is disconnected from the loss", stacklevel=2)
            p.grad = np.zeros_like(p.data)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def _cols(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    # (N, H, W, C, kh, kw) -> (N*H*W, kh*kw*C) matching kernel.reshape(kh*kw*C, I)
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, :h, :w]
    n, c = xp.shape[0], xp.shape[3]
    return v.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * c)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Same-padding stride-1 convolution, ``x`` is NHWC and ``w`` is (kh, kw, C, I)."""
    kh, kw, c, n_out = w.data.shape
    n, h, wd, cx = x.data.shape
    if cx != c:
        raise ValueError(f"conv input has {cx} channels, kernel expects {c}")
    top, bottom, left, right = same_padding((kh, kw))
    xp = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    cols = _cols(xp, kh, kw, h, wd)
    w2 = w.data.reshape(kh * kw * c, n_out)
    out = Tensor((cols @ w2).reshape(n, h, wd, n_out), (x, w))

    def _backward(g):
        g2 = g.reshape(-1, n_out)
        if w.requires_grad:
            w._accum((cols.T @ g2).reshape(w.data.shape))
        if x.requires_grad:
            dcols = (g2 @ w2.T).reshape(n, h, wd, kh, kw, c)
            dxp = np.zeros_like(xp)
            for ky in range(kh):
                for kx in range(kw):
                    dxp[:, ky:ky + h, kx:kx + wd] += dcols[:, :, :, ky, kx]
            x._accum(dxp[:, top:top + h, left:left + wd])

    out._backward = _backward
    return out


def flatten(x: Tensor) -> Tensor:
    shape = x.data.shape
    out = Tensor(x.data.reshape(shape[0], -1), (x,))
    out._backward = lambda g: x._accum(g.reshape(shape))
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    parents = (x, w) if b is None else (x, w, b)
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y, parents)

    def _backward(g):
        w._accum(x.data.T @ g)
        x._accum(g @ w.data.T)
        if b is not None:
            b._accum(g.sum(axis=0))

    out._backward = _backward
    return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, training: bool) -> Tensor:
    """Per-channel batch norm over all axes but the last.

    In training mode running statistics in ``state`` are updated in place.
    """
    axes = tuple(range(x.data.ndim - 1))
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mean
        state.running_var = m * state.running_var + (1 - m) * var
    else:
        mean, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv
    out = Tensor(xhat * gamma.data + beta.data, (x, gamma, beta))

    def _backward(g):
        gamma._accum((g * xhat).sum(axis=axes))
        beta._accum(g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data
        if training:
            count = x.data.size // x.data.shape[-1]
            dx = inv / count * (count * dxhat - dxhat.sum(axis=axes)
                                - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        x._accum(dx)

    out._backward = _backward
    return out


def max_pool(x: Tensor, window: tuple[int, int]) -> Tensor:
    ph, pw = window
    n, h, w, c = x.data.shape
    if ph > h or pw > w:
        raise ValueError(f"pool window {window} does not fit input {h}x{w}")
    ho, wo = h // ph, w // pw
    blocks = x.data[:, :ho * ph, :wo * pw].reshape(n, ho, ph, wo, pw, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, ph * pw)
    arg = blocks.argmax(axis=-1)
    out = Tensor(np.take_along_axis(blocks, arg[..., None], -1)[..., 0], (x,))

    def _backward(g):
        gb = np.zeros((n, ho, wo, c, ph * pw), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], -1)
        gb = gb.reshape(n, ho, wo, c, ph, pw).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * ph, wo * pw, c)
        dx = np.zeros_like(x.data)
        dx[:, :ho * ph, :wo * pw] = gb
        x._accum(dx)

    out._backward = _backward
    return out


def activation(x: Tensor, quantize: bool = True, k: int = 1) -> Tensor:
    """Clamp to [0, 1], then optionally k-bit quantize.

    The gradient is gated to where the input lies in [0, 1]; the quantizer
    itself is treated as identity.
    """
    clamped = np.clip(x.data, 0.0, 1.0)
    if quantize:
        levels = (1 << k) - 1
        clamped = (round_half_away(clamped * levels) / levels).astype(x.data.dtype)
    gate = (x.data >= 0) & (x.data <= 1)
    out = Tensor(clamped, (x,))
    out._backward = lambda g: x._accum(g * gate)
    return out


def binarize(w: Tensor) -> Tensor:
    """``sign(w) * mean|w|`` forward, gradient passed straight through to ``w``."""
    out = Tensor(binarize_dense(w.data), (w,))
    out._backward = lambda g: w._accum(g)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    out = Tensor(x.data * mask, (x,))
    out._backward = lambda g: x._accum(g * mask)
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    p = softmax(logits.data)
    idx = np.arange(len(labels))
    loss = -np.log(np.maximum(p[idx, labels], np.finfo(p.dtype).tiny)).mean()
    out = Tensor(np.asarray(loss, dtype=logits.data.dtype), (logits,))

    def _backward(g):
        d = p.copy()
        d[idx, labels] -= 1.0
        logits._accum(d * (g / len(labels)))

    out._backward = _backward
    return out
