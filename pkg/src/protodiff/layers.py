"""Shared neural building blocks: linear maps, multi-head attention, FFN.

All helpers operate on batched tensors of shape (B, N, C) and are pure
functions of their weight tensors, so they compose under the autodiff tape.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .rng import Rng


def xavier_init(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    """Xavier-normal weight draw."""
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return std * rng.normals((fan_in, fan_out))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis of a rank-2 or rank-3 input."""
    shape = x.shape
    if x.ndim == 3:
        x2 = ad.reshape(x, (shape[0] * shape[1], shape[2]))
    else:
        x2 = x
    y = ad.matmul(x2, w)
    if b is not None:
        y = ad.add(y, ad.broadcast_to(b, y.shape))
    if x.ndim == 3:
        y = ad.reshape(y, (shape[0], shape[1], w.shape[1]))
    return y


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, N, C) -> (B, H, N, C//H)."""
    b, n, c = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, H, N, d) -> (B, N, H*d)."""
    b, h, n, d = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def cross_attention(q_in: Tensor, kv_in: Tensor, w_q: Tensor, w_k: Tensor,
                    w_v: Tensor, w_o: Tensor, heads: int) -> Tensor:
    """Softmax(QK^T / sqrt(d)) V with multi-head projections.

    ``q_in`` has shape (B, Nq, C) and ``kv_in`` (B, Nk, C); self-attention is
    the ``q_in is kv_in`` case.
    """
    c = q_in.shape[-1]
    if c % heads != 0:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    d = c // heads
    q = split_heads(linear(q_in, w_q), heads)
    k = split_heads(linear(kv_in, w_k), heads)
    v = split_heads(linear(kv_in, w_v), heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    attn = ad.softmax(scores, axis=-1)
    out = merge_heads(ad.matmul(attn, v))
    return linear(out, w_o)


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer feed-forward with GELU."""
    return linear(ad.gelu(linear(x, w1, b1)), w2, b2)
