"""Prototype-aware diffusion transformer denoiser.

Each block runs adaLN-modulated self-attention over the noisy tokens, then an
unmodulated prototype cross-attention (tokens query the noisy prototypes),
then an adaLN-modulated feed-forward, all residual. The adaLN modulation heads
and the output projection are zero-initialized so the untrained network
predicts exactly zero noise.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .layers import cross_attention, ffn, linear, xavier_init
from .rng import Rng


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos embedding at geometrically spaced frequencies (base 10000).

    ``t`` may be an int or an int array; the result has shape (dim,) or
    (len(t), dim). Values are bounded in [-1, 1] and t=0 maps to [0, 1, 0, 1, ...].
    """
    if dim % 2 != 0:
        raise ConfigError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    tv = np.asarray(t, dtype=np.float64)
    angles = tv[..., None] * freqs
    out = np.empty(tv.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


class _Block:
    """One denoiser block; parameters only, no buffers."""

    _MOD_NAMES = ("shift_attn", "scale_attn", "gate_attn", "shift_ffn", "scale_ffn", "gate_ffn")

    def __init__(self, channels: int, heads: int, ff_mult: int, time_dim: int, rng: Rng):
        c_ff = ff_mult * channels
        p = lambda arr: Tensor(arr, requires_grad=True)
        self.attn = {k: p(xavier_init(rng, channels, channels)) for k in ("w_q", "w_k", "w_v", "w_o")}
        self.cross = {k: p(xavier_init(rng, channels, channels)) for k in ("w_q", "w_k", "w_v", "w_o")}
        self.ffn_w1 = p(xavier_init(rng, channels, c_ff))
        self.ffn_b1 = p(np.zeros(c_ff))
        self.ffn_w2 = p(xavier_init(rng, c_ff, channels))
        self.ffn_b2 = p(np.zeros(channels))
        # zero init keeps the untrained block an identity map
        self.mod = {name: (p(np.zeros((time_dim, channels))), p(np.zeros(channels)))
                    for name in self._MOD_NAMES}

    def parameters(self):
        for k, t in self.attn.items():
            yield f"attn/{k}", t
        for k, t in self.cross.items():
            yield f"cross/{k}", t
        yield "ffn/w1", self.ffn_w1
        yield "ffn/b1", self.ffn_b1
        yield "ffn/w2", self.ffn_w2
        yield "ffn/b2", self.ffn_b2
        for name, (w, b) in self.mod.items():
            yield f"mod/{name}/w", w
            yield f"mod/{name}/b", b


class Denoiser:
    """Stack of prototype-aware DiT blocks predicting token noise."""

    def __init__(self, channels: int, depth: int = 4, heads: int = 4, ff_mult: int = 4,
                 time_dim: int | None = None, rng: Rng | None = None):
        if channels % heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        rng = rng or Rng(0)
        self.channels = channels
        self.depth = depth
        self.heads = heads
        self.ff_mult = ff_mult
        self.time_dim = time_dim if time_dim is not None else 4 * channels
        if self.time_dim % 2 != 0:
            raise ConfigError(f"time_dim must be even, got {self.time_dim}")
        p = lambda arr: Tensor(arr, requires_grad=True)
        self.time_w1 = p(xavier_init(rng, self.time_dim, self.time_dim))
        self.time_b1 = p(np.zeros(self.time_dim))
        self.time_w2 = p(xavier_init(rng, self.time_dim, self.time_dim))
        self.time_b2 = p(np.zeros(self.time_dim))
        self.blocks = [_Block(channels, heads, ff_mult, self.time_dim, rng) for _ in range(depth)]
        self.head_w = p(np.zeros((channels, channels)))
        self.head_b = p(np.zeros(channels))
        self._ln_gain = Tensor(np.ones(channels))
        self._ln_bias = Tensor(np.zeros(channels))

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("time/w1", self.time_w1), ("time/b1", self.time_b1),
               ("time/w2", self.time_w2), ("time/b2", self.time_b2)]
        for i, blk in enumerate(self.blocks):
            out.extend((f"block{i}/{name}", t) for name, t in blk.parameters())
        out.append(("head/w", self.head_w))
        out.append(("head/b", self.head_b))
        return out

    def num_params(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def _modulation(self, blk: _Block, emb_act: Tensor, bsz: int, n: int):
        mods = {}
        for name in blk._MOD_NAMES:
            w, b = blk.mod[name]
            m = linear(emb_act, w, b)  # (B, C)
            mods[name] = ad.broadcast_to(ad.reshape(m, (bsz, 1, self.channels)), (bsz, n, self.channels))
        return mods

    def forward(self, x_t: Tensor, p_t: Tensor, t) -> Tensor:
        """Predict token noise from (x_t, P_t, t); prototypes are conditioning only."""
        single = x_t.ndim == 2
        x = ad.reshape(x_t, (1,) + x_t.shape) if single else x_t
        p = ad.reshape(p_t, (1,) + p_t.shape) if single else p_t
        if x.ndim != 3 or p.ndim != 3 or x.shape[0] != p.shape[0] or x.shape[2] != self.channels \
                or p.shape[2] != self.channels:
            raise ShapeError(f"denoiser: bad input shapes {x_t.shape} / {p_t.shape} for C={self.channels}")
        bsz, n, c = x.shape
        tv = np.broadcast_to(np.asarray(t, dtype=np.int64), (bsz,))

        emb = Tensor(timestep_embedding(tv, self.time_dim))
        emb = linear(ad.gelu(linear(emb, self.time_w1, self.time_b1)), self.time_w2, self.time_b2)
        emb_act = ad.gelu(emb)

        for blk in self.blocks:
            mods = self._modulation(blk, emb_act, bsz, n)
            h = ad.layer_norm(x, self._ln_gain, self._ln_bias)
            h = ad.add(ad.mul(h, ad.add(mods["scale_attn"], 1.0)), mods["shift_attn"])
            a = cross_attention(h, h, blk.attn["w_q"], blk.attn["w_k"], blk.attn["w_v"],
                                blk.attn["w_o"], self.heads)
            x = ad.add(x, ad.mul(mods["gate_attn"], a))
            cx = cross_attention(x, p, blk.cross["w_q"], blk.cross["w_k"], blk.cross["w_v"],
                                 blk.cross["w_o"], self.heads)
            x = ad.add(x, cx)
            h = ad.layer_norm(x, self._ln_gain, self._ln_bias)
            h = ad.add(ad.mul(h, ad.add(mods["scale_ffn"], 1.0)), mods["shift_ffn"])
            f = ffn(h, blk.ffn_w1, blk.ffn_b1, blk.ffn_w2, blk.ffn_b2)
            x = ad.add(x, ad.mul(mods["gate_ffn"], f))

        out = linear(ad.layer_norm(x, self._ln_gain, self._ln_bias), self.head_w, self.head_b)
        return ad.reshape(out, (n, c)) if single else out
