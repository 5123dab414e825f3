"""Window partitioning, window attention with a relative position bias table,
and the transpose shuffle / rotation restore permutation pair.

Slice stacks are ``(N, H, W, C)`` tensors; windows are ``(N * nH * nW, M*M, C)``
with windows in raster order and tokens in raster order within a window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .nn import Init, Linear, Module
from .tensor import ShapeError


@dataclass(frozen=True)
class WindowGrid:
    height: int
    width: int
    window: int

    def __post_init__(self):
        if self.window < 1 or self.height % self.window or self.width % self.window:
            raise ShapeError(f"window {self.window} does not divide slice {self.height}x{self.width}")

    @property
    def rows(self) -> int:
        return self.height // self.window

    @property
    def cols(self) -> int:
        return self.width // self.window

    @property
    def count(self) -> int:
        return self.rows * self.cols


def effective_window(side: int, window: int) -> int:
    """Clamp the window to the slice when the slice is smaller than it."""
    return side if side < window else window


def window_partition(x, window: int):
    n, h, w, c = x.shape
    grid = WindowGrid(h, w, window)
    m = window
    y = ops.reshape(x, (n, grid.rows, m, grid.cols, m, c))
    y = ops.permute(y, (0, 1, 3, 2, 4, 5))
    return ops.reshape(y, (n * grid.count, m * m, c))


def window_reverse(windows, grid: WindowGrid, n: Optional[int] = None):
    m = grid.window
    total, tokens, c = windows.shape
    if tokens != m * m or total % grid.count:
        raise ShapeError(f"windows {windows.shape} incompatible with {grid}")
    n = total // grid.count if n is None else n
    y = ops.reshape(windows, (n, grid.rows, grid.cols, m, m, c))
    y = ops.permute(y, (0, 1, 3, 2, 4, 5))
    return ops.reshape(y, (n, grid.height, grid.width, c))


def _shuffle_axes(x, window: int):
    n, h, w, c = x.shape
    grid = WindowGrid(h, w, window)
    if grid.rows != grid.cols:
        raise ShapeError(f"transpose shuffle needs a square window grid, got {grid.rows}x{grid.cols}")
    return n, h, w, c, grid.rows


def transpose_shuffle(x, window: int):
    """Regroup tokens so every window draws evenly from all original windows.

    Row ``r = a * g + i`` (``g`` = grid side) moves to window ``i``, offset
    ``a``; likewise for columns.  When ``g == window`` this swaps the window
    coordinate with the intra-window offset.
    """
    n, h, w, c, g = _shuffle_axes(x, window)
    m = window
    y = ops.reshape(x, (n, m, g, m, g, c))
    y = ops.permute(y, (0, 2, 1, 4, 3, 5))
    return ops.reshape(y, (n, h, w, c))


def rotation_restore(x, window: int):
    n, h, w, c, g = _shuffle_axes(x, window)
    m = window
    y = ops.reshape(x, (n, g, m, g, m, c))
    y = ops.permute(y, (0, 2, 1, 4, 3, 5))
    return ops.reshape(y, (n, h, w, c))


def relative_position_index(window: int) -> np.ndarray:
    """``(M*M, M*M)`` map from token pair to a row of the ``(2M-1)^2`` bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def attend(q, k, v, bias, scale: float):
    """Softmax(q k^T * scale + bias) v on ``(..., heads, T, d)`` tensors."""
    scores = ops.scale(ops.matmul(q, ops.permute(k, _swap_last(k.ndim))), scale)
    if bias is not None:
        scores = ops.add(scores, bias)
    return ops.matmul(ops.softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


class WindowAttention(Module):
    """Multi-head self-attention inside non-overlapping windows.

    The Q/K/V projections are fused into one ``C x 3C`` matrix; the output
    projection is ``C x C``.  A learned ``((2M-1)^2, heads)`` table supplies a
    bias for every relative offset inside the window.
    """

    def __init__(self, init: Init, channels: int, heads: int, window: int, fused_qkv: bool = True):
        if channels % heads:
            raise ShapeError(f"{channels} channels not divisible by {heads} heads")
        self.channels, self.heads, self.window = channels, heads, window
        self.head_dim = channels // heads
        if fused_qkv:
            self.qkv = Linear(init, channels, 3 * channels)
        self.proj = Linear(init, channels, channels)
        self.rpb_table = init.trunc_normal(((2 * window - 1) ** 2, heads))
        self.rp_index = relative_position_index(window)

    def position_bias(self):
        t = self.window * self.window
        b = ops.take(self.rpb_table, self.rp_index)  # (T, T, heads)
        return ops.reshape(ops.permute(b, (2, 0, 1)), (1, self.heads, t, t))

    def split_heads(self, x):
        b, t, _ = x.shape
        return ops.permute(ops.reshape(x, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

    def merge_heads(self, x):
        b, h, t, d = x.shape
        return ops.reshape(ops.permute(x, (0, 2, 1, 3)), (b, t, h * d))

    def attend_windows(self, q, k, v):
        """Attention on projected ``(windows, T, C)`` q/k/v, before the output projection."""
        out = attend(self.split_heads(q), self.split_heads(k), self.split_heads(v),
                     self.position_bias(), 1.0 / math.sqrt(self.head_dim))
        return self.merge_heads(out)

    def qkv_windows(self, x):
        c = self.channels
        return ops.split(self.qkv(x), [c, c, c], axis=-1)

    def __call__(self, x):
        """``(N, H, W, C) -> (N, H, W, C)``."""
        n, h, w, c = x.shape
        if c != self.channels:
            raise ShapeError(f"attention expects {self.channels} channels, got {c}")
        grid = WindowGrid(h, w, self.window)
        windows = window_partition(x, self.window)
        q, k, v = self.qkv_windows(windows)
        out = self.proj(self.attend_windows(q, k, v))
        return window_reverse(out, grid, n)


def w_msa(x, attn: WindowAttention):
    return attn(x)


def dense_attention_reference(tokens: np.ndarray, attn: WindowAttention) -> np.ndarray:
    """Plain numpy multi-head attention over one window's ``(T, C)`` tokens.

    Loops over heads and query tokens; shares only the weights with
    :class:`WindowAttention`, not its code path.
    """
    w_qkv, b_qkv = attn.qkv.weight.data, attn.qkv.bias.data
    w_o, b_o = attn.proj.weight.data, attn.proj.bias.data
    table = attn.rpb_table.data
    m = attn.window
    t, c = tokens.shape
    d = attn.head_dim
    qkv = tokens @ w_qkv + b_qkv
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    heads = []
    for h in range(attn.heads):
        sl = slice(h * d, (h + 1) * d)
        out = np.zeros((t, d), dtype=tokens.dtype)
        for i in range(t):
            ri, ci = divmod(i, m)
            logits = np.empty(t, dtype=tokens.dtype)
            for j in range(t):
                rj, cj = divmod(j, m)
                row = (ri - rj + m - 1) * (2 * m - 1) + (ci - cj + m - 1)
                logits[j] = q[i, sl] @ k[j, sl] / math.sqrt(d) + table[row, h]
            p = np.exp(logits - logits.max())
            p /= p.sum()
            out[i] = p @ v[:, sl]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ w_o + b_o

