"""Entropy-regularized optimal transport via log-domain Sinkhorn iterations.

The plan solves  min_{T in Pi(a,b)}  <T, C> + eps * sum T log T  between the
token empirical distribution and the prototype distribution. For the training
loss the plan is treated as a constant (envelope-style): gradients flow only
through the cost matrix into tokens and prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_EPS_SCALE = 0.05  # epsilon = scale * mean(cost) when not given explicitly
DEFAULT_MAX_ITER = 200
DEFAULT_TOL = 1e-6


@dataclass
class OTPlan:
    """Converged (or truncated) transport plan with its diagnostics."""

    plan: np.ndarray
    cost: np.ndarray
    epsilon: float
    iterations_used: int
    converged: bool
    violations: list[float] = field(default_factory=list)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn_plan(cost: np.ndarray, a: np.ndarray, b: np.ndarray, epsilon: float,
                  max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL) -> OTPlan:
    """Log-domain Sinkhorn between discrete distributions a (rows) and b (cols).

    Stops once the worst marginal violation drops below ``tol`` or after
    ``max_iter`` iterations; ``converged`` records which happened.
    """
    cost = np.asarray(cost, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("sinkhorn_plan: cost matrix contains non-finite entries")
    if epsilon <= 0:
        raise ValueError(f"sinkhorn_plan: epsilon must be positive, got {epsilon}")
    for name, w, n in (("a", a, cost.shape[0]), ("b", b, cost.shape[1])):
        if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
            raise ValueError(f"sinkhorn_plan: {name} is not a distribution over {n} atoms")

    loga = np.log(a)
    logb = np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    violations: list[float] = []
    converged = False
    iters = 0
    for iters in range(1, max_iter + 1):
        f = -epsilon * _logsumexp(logb[None, :] + (g[None, :] - cost) / epsilon, axis=1)
        g = -epsilon * _logsumexp(loga[:, None] + (f[:, None] - cost) / epsilon, axis=0)
        plan = np.exp(loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - cost) / epsilon)
        viol = max(np.abs(plan.sum(axis=1) - a).max(), np.abs(plan.sum(axis=0) - b).max())
        violations.append(float(viol))
        if viol < tol:
            converged = True
            break
    return OTPlan(plan=plan, cost=cost, epsilon=float(epsilon),
                  iterations_used=iters, converged=converged, violations=violations)


def _batched_sinkhorn(cost: np.ndarray, eps: np.ndarray, max_iter: int, tol: float) -> np.ndarray:
    """Uniform-marginal Sinkhorn over a (B, N, K) cost stack; returns plans."""
    bsz, n, k = cost.shape
    loga = -np.log(n)
    logb = -np.log(k)
    e = eps[:, None, None]
    f = np.zeros((bsz, n, 1))
    g = np.zeros((bsz, 1, k))
    for _ in range(max_iter):
        h = logb + (g - cost) / e
        m = h.max(axis=2, keepdims=True)
        f = -e * (m + np.log(np.exp(h - m).sum(axis=2, keepdims=True)))
        h = loga + (f - cost) / e
        m = h.max(axis=1, keepdims=True)
        g = -e * (m + np.log(np.exp(h - m).sum(axis=1, keepdims=True)))
        plan = np.exp(loga + logb + (f + g - cost) / e)
        viol = max(np.abs(plan.sum(axis=2) - 1.0 / n).max(),
                   np.abs(plan.sum(axis=1) - 1.0 / k).max())
        if viol < tol:
            break
    return plan


def global_alignment_loss(tokens: Tensor, protos: Tensor, epsilon: float | None = None,
                          max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL) -> Tensor:
    """Entropic OT value between tokens and prototypes, differentiable through the cost.

    Cost is the squared Euclidean distance. ``epsilon=None`` uses the
    cost-relative default. Accepts (N, C)/(K, C) or batched (B, N, C)/(B, K, C);
    the batched form averages per-record values.
    """
    single = tokens.ndim == 2
    x = ad.reshape(tokens, (1,) + tokens.shape) if single else tokens
    p = ad.reshape(protos, (1,) + protos.shape) if single else protos
    bsz, n, _ = x.shape
    k = p.shape[1]

    x_sq = ad.tsum(ad.square(x), axis=2, keepdims=True)          # (B, N, 1)
    p_sq = ad.tsum(ad.square(p), axis=2, keepdims=True)          # (B, K, 1)
    cross = ad.matmul(x, ad.transpose(p, (0, 2, 1)))             # (B, N, K)
    cost = ad.add(ad.sub(ad.broadcast_to(x_sq, (bsz, n, k)), ad.scale(cross, 2.0)),
                  ad.broadcast_to(ad.transpose(p_sq, (0, 2, 1)), (bsz, n, k)))

    cost_np = np.maximum(cost.data, 0.0)
    if epsilon is None:
        eps = DEFAULT_EPS_SCALE * cost_np.mean(axis=(1, 2))
        eps = np.maximum(eps, 1e-12)
    else:
        eps = np.full(bsz, float(epsilon))
    plans = _batched_sinkhorn(cost_np, eps, max_iter, tol)

    linear = ad.scale(ad.tsum(ad.mul(cost, Tensor(plans))), 1.0 / bsz)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(plans > 0.0, plans * np.log(plans), 0.0).sum(axis=(1, 2))
    entropy_term = float((eps * ent).mean())
    return ad.add(linear, entropy_term)
