from itertools import permutations

import numpy as np
import pytest

from protodiff import Rng, Tensor, grad_check
from protodiff.transport import global_alignment_loss, sinkhorn_plan


def _uniform(n):
    return np.full(n, 1.0 / n)


class TestSinkhornPlan:
    def test_single_cell(self):
        res = sinkhorn_plan(np.array([[3.0]]), _uniform(1), _uniform(1), epsilon=0.1)
        np.testing.assert_allclose(res.plan, [[1.0]], atol=1e-12)
        assert res.converged

    def test_constant_cost_uniform_plan(self):
        res = sinkhorn_plan(np.full((4, 3), 2.5), _uniform(4), _uniform(3), epsilon=0.05)
        np.testing.assert_allclose(res.plan, 1.0 / 12.0, atol=1e-9)

    def test_marginals_within_tol_when_converged(self):
        rng = Rng(8)
        for trial in range(20):
            n, k = 5, 3
            cost = np.abs(rng.normals((n, k)))
            res = sinkhorn_plan(cost, _uniform(n), _uniform(k), epsilon=0.05,
                                max_iter=2000, tol=1e-6)
            assert res.converged
            assert np.abs(res.plan.sum(axis=1) - 1.0 / n).max() <= 1e-6
            assert np.abs(res.plan.sum(axis=0) - 1.0 / k).max() <= 1e-6
            assert np.all(res.plan > 0.0)

    def test_violation_trace_non_increasing(self):
        rng = Rng(12)
        cost = np.abs(rng.normals((6, 4)))
        res = sinkhorn_plan(cost, _uniform(6), _uniform(4), epsilon=0.02, max_iter=500)
        v = np.array(res.violations)
        assert np.all(np.diff(v) <= 1e-12)

    def test_small_epsilon_matches_permutation_optimum(self):
        # entropic plan at eps=1e-3 lands within 2% of the exact assignment cost
        rng = Rng(99)
        for trial in range(50):
            cost = rng.uniform(9).reshape(3, 3) + 0.1
            res = sinkhorn_plan(cost, _uniform(3), _uniform(3), epsilon=1e-3,
                                max_iter=2000, tol=1e-9)
            achieved = float((res.plan * cost).sum())
            best = min(sum(cost[i, p[i]] for i in range(3)) for p in permutations(range(3))) / 3.0
            assert abs(achieved - best) <= 0.02 * best

    def test_non_finite_cost_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            sinkhorn_plan(np.array([[np.inf, 1.0]]), _uniform(1), _uniform(2), 0.1)

    def test_bad_marginals_rejected(self):
        with pytest.raises(ValueError, match="distribution"):
            sinkhorn_plan(np.ones((2, 2)), np.array([0.9, 0.9]), _uniform(2), 0.1)


class TestGlobalAlignmentLoss:
    def test_zero_cost_diagonal(self):
        pts = Rng(3).normals((4, 5))
        loss = global_alignment_loss(Tensor(pts), Tensor(pts.copy()), epsilon=1e-4)
        # linear term vanishes on the diagonal; tiny entropic remainder only
        res = sinkhorn_plan(_pairwise_sq(pts, pts), _uniform(4), _uniform(4), 1e-4,
                            max_iter=5000, tol=1e-9)
        linear = float((res.plan * res.cost).sum())
        assert linear < 1e-6
        assert abs(loss.item()) < 0.01

    def test_cost_homogeneity_at_fixed_plan(self):
        rng = Rng(7)
        x = rng.normals((5, 3))
        p = rng.normals((2, 3))
        cost = _pairwise_sq(x, p)
        res = sinkhorn_plan(cost, _uniform(5), _uniform(2), epsilon=0.05)
        for s in (0.5, 3.0):
            scaled = _pairwise_sq(s * x, s * p)
            np.testing.assert_allclose((res.plan * scaled).sum(),
                                       s * s * (res.plan * cost).sum(), rtol=1e-10)

    def test_matched_pairs_near_diagonal(self):
        x = np.array([[1.0, 0.0], [-1.0, 0.0]])
        p = np.array([[1.0, 0.0], [-1.0, 0.0]])
        res = sinkhorn_plan(_pairwise_sq(x, p), _uniform(2), _uniform(2), epsilon=1e-3,
                            max_iter=5000)
        linear = float((res.plan * res.cost).sum())
        assert linear < 0.05

    def test_linear_term_permutation_invariant(self):
        rng = Rng(21)
        x = rng.normals((6, 4))
        p = rng.normals((3, 4))
        base = sinkhorn_plan(_pairwise_sq(x, p), _uniform(6), _uniform(3), 0.05)
        lin0 = (base.plan * base.cost).sum()
        for perm_x in (Rng(1).permutation(6),):
            for perm_p in (Rng(2).permutation(3),):
                res = sinkhorn_plan(_pairwise_sq(x[perm_x], p[perm_p]),
                                    _uniform(6), _uniform(3), 0.05)
                np.testing.assert_allclose((res.plan * res.cost).sum(), lin0, rtol=1e-8)

    def test_gradient_flows_through_cost_only(self):
        # envelope gradient: d loss / d C = plan, so FD through the re-solved
        # plan matches the fixed-plan tape gradient
        rng = Rng(31)
        x = Tensor(rng.normals((4, 3)))
        p = Tensor(rng.normals((2, 3)))
        err = grad_check(lambda t: global_alignment_loss(x, t, epsilon=0.05,
                                                         max_iter=3000, tol=1e-12), p)
        assert err < 1e-4

    def test_batched_matches_mean_of_singles(self):
        # batched and solo solves stop at slightly different iterates, so the
        # comparison is tight-tolerance rather than bitwise
        rng = Rng(41)
        xs = rng.normals((3, 5, 4))
        ps = rng.normals((3, 2, 4))
        kw = dict(epsilon=0.07, max_iter=3000, tol=1e-12)
        batched = global_alignment_loss(Tensor(xs), Tensor(ps), **kw).item()
        singles = [global_alignment_loss(Tensor(xs[i]), Tensor(ps[i]), **kw).item()
                   for i in range(3)]
        np.testing.assert_allclose(batched, np.mean(singles), rtol=1e-6)


def _pairwise_sq(x, p):
    return ((x[:, None, :] - p[None, :, :]) ** 2).sum(axis=2)
