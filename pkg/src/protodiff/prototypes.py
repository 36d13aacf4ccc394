"""Learnable local/global prototype extraction and the token-alignment losses.

A ``PrototypeExtractor`` turns a set of learnable queries into prototypes
conditioned on an image's tokens through one cross-attention + FFN layer,
each with a residual connection. Two independent instances provide the local
(M-row) and global (K-row) prototype banks.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericalDomainError
from .layers import cross_attention, ffn, xavier_init
from .rng import Rng

QUERY_INIT_STD = 0.02


class PrototypeExtractor:
    """Cross-attention prototype extractor with independent parameters."""

    def __init__(self, num_prototypes: int, channels: int, heads: int = 4,
                 ff_mult: int = 4, rng: Rng | None = None):
        if channels % heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        rng = rng or Rng(0)
        self.num_prototypes = num_prototypes
        self.channels = channels
        self.heads = heads
        c_ff = ff_mult * channels
        p = lambda arr: Tensor(arr, requires_grad=True)
        self.queries = p(QUERY_INIT_STD * rng.normals((num_prototypes, channels)))
        self.w_q = p(xavier_init(rng, channels, channels))
        self.w_k = p(xavier_init(rng, channels, channels))
        self.w_v = p(xavier_init(rng, channels, channels))
        self.w_o = p(xavier_init(rng, channels, channels))
        self.ffn_w1 = p(xavier_init(rng, channels, c_ff))
        self.ffn_b1 = p(np.zeros(c_ff))
        self.ffn_w2 = p(xavier_init(rng, c_ff, channels))
        self.ffn_b2 = p(np.zeros(channels))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("queries", self.queries), ("w_q", self.w_q), ("w_k", self.w_k),
                ("w_v", self.w_v), ("w_o", self.w_o), ("ffn_w1", self.ffn_w1),
                ("ffn_b1", self.ffn_b1), ("ffn_w2", self.ffn_w2), ("ffn_b2", self.ffn_b2)]

    def __call__(self, tokens: Tensor) -> Tensor:
        """Extract prototypes from tokens of shape (N, C) or (B, N, C)."""
        single = tokens.ndim == 2
        x = ad.reshape(tokens, (1,) + tokens.shape) if single else tokens
        bsz = x.shape[0]
        m, c = self.queries.shape
        q = ad.broadcast_to(self.queries, (bsz, m, c))
        attended = cross_attention(q, x, self.w_q, self.w_k, self.w_v, self.w_o, self.heads)
        updated = ad.add(attended, q)
        out = ad.add(ffn(updated, self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2), updated)
        return ad.reshape(out, (m, c)) if single else out


def extract_prototypes(extractor: PrototypeExtractor, tokens: Tensor) -> Tensor:
    return extractor(tokens)


def _check_nonzero_norms(name: str, sq_norms: np.ndarray) -> None:
    if np.any(sq_norms == 0.0):
        raise NumericalDomainError(f"zero-norm {name} in cosine computation")


def _cosine_matrix(tokens: Tensor, protos: Tensor) -> Tensor:
    """Pairwise cosine similarities, (B, N, M) for batched inputs."""
    x_sq = ad.tsum(ad.square(tokens), axis=2, keepdims=True)
    p_sq = ad.tsum(ad.square(protos), axis=2, keepdims=True)
    _check_nonzero_norms("token", x_sq.data)
    _check_nonzero_norms("prototype", p_sq.data)
    dots = ad.matmul(tokens, ad.transpose(protos, (0, 2, 1)))
    denom = ad.matmul(ad.sqrt(x_sq), ad.transpose(ad.sqrt(p_sq), (0, 2, 1)))
    return ad.div(dots, denom)


def local_alignment_loss(tokens: Tensor, protos: Tensor) -> Tensor:
    """Mean over tokens of (1 - cosine to the nearest prototype).

    The min is hard; ties resolve to the lowest prototype index, and the
    gradient reaches only the selected prototype for each token.
    """
    single = tokens.ndim == 2
    x = ad.reshape(tokens, (1,) + tokens.shape) if single else tokens
    p = ad.reshape(protos, (1,) + protos.shape) if single else protos
    sims = _cosine_matrix(x, p)
    dist = ad.add(ad.scale(sims, -1.0), 1.0)
    return ad.tmean(ad.reshape(ad.min_over(dist, axis=2), (-1,)))


def prototype_similarity_map(tokens: Tensor | np.ndarray, protos: Tensor | np.ndarray) -> np.ndarray:
    """Cosine similarity of each token to each prototype: (num_protos, N).

    Export-only; carries no gradient. The caller reshapes rows to (h, w).
    """
    x = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=np.float64)
    p = protos.data if isinstance(protos, Tensor) else np.asarray(protos, dtype=np.float64)
    xn = np.linalg.norm(x, axis=1)
    pn = np.linalg.norm(p, axis=1)
    if np.any(xn == 0.0) or np.any(pn == 0.0):
        raise NumericalDomainError("zero-norm vector in similarity map")
    return (p @ x.T) / (pn[:, None] * xn[None, :])
