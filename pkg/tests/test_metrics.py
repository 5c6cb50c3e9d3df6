import numpy as np
import pytest

from sphgnn.box import DomainSpec
from sphgnn.metrics import (
    EvalReport,
    evaluate_rollout,
    exact_ot,
    kinetic_energy,
    mse_positions,
    sinkhorn_distance,
)

BOX = DomainSpec((1.0, 1.0, 1.0))


class TestMSE:
    def test_identical_frames(self, rng):
        p = rng.random((30, 3))
        assert mse_positions(p, p, BOX) == 0.0

    def test_uniform_offset(self):
        ref = np.full((4, 3), 0.5)
        pred = ref.copy()
        pred[:, 0] += 0.01
        np.testing.assert_allclose(mse_positions(pred, ref, BOX), 0.01**2 / 3.0)

    def test_wraps_through_boundary(self):
        pred = np.array([[0.99, 0.5, 0.5]])
        ref = np.array([[0.01, 0.5, 0.5]])
        np.testing.assert_allclose(mse_positions(pred, ref, BOX), 0.02**2 / 3.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_positions(np.zeros((3, 3)), np.zeros((4, 3)), BOX)


class TestKineticEnergy:
    def test_zero_velocities(self):
        assert kinetic_energy(np.zeros((5, 3)), 1.0) == 0.0

    def test_uniform_speed(self):
        v = np.zeros((7, 3))
        v[:, 1] = 2.0
        m = 0.3
        np.testing.assert_allclose(kinetic_energy(v, m), 2.0 * m * 7)

    def test_fresh_vortex_field_energy(self):
        # oracle: quadrature of the initial field gives 1/8 per unit mass
        from sphgnn.sph import tgv_config, tgv_init

        state = tgv_init(20, tgv_config(dx=0.05, relax_steps=0), np.random.default_rng(0))
        e = kinetic_energy(state.vel, state.mass)
        np.testing.assert_allclose(e / state.mass.sum(), 0.125, rtol=0.02)


class TestSinkhorn:
    def test_identical_sets_zero(self, rng):
        a = rng.random((25, 3))
        assert abs(sinkhorn_distance(a, a, BOX).value) < 1e-9

    def test_single_pair(self):
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[0.1, 0.0, 0.0]])
        r = sinkhorn_distance(a, b, BOX, eps=1e-4)
        assert abs(r.value - 0.01) / 0.01 < 0.01

    @pytest.mark.parametrize("n", [3, 5, 6])
    def test_matches_exact_ot_small_eps(self, n):
        rng = np.random.default_rng(n)
        a = rng.random((n, 3))
        b = rng.random((n, 3))
        exact = exact_ot(a, b, BOX)
        r = sinkhorn_distance(a, b, BOX, eps=1e-4, max_iters=20000, tol=1e-10)
        assert abs(r.value - exact) / exact < 0.01

    def test_eps_consistency_decreasing(self):
        rng = np.random.default_rng(42)
        a = rng.random((5, 3))
        b = rng.random((5, 3))
        exact = exact_ot(a, b, BOX)
        errs = [
            abs(sinkhorn_distance(a, b, BOX, eps=e, max_iters=20000, tol=1e-11).value - exact)
            for e in (3e-2, 1e-2, 3e-3, 1e-3)
        ]
        assert all(e1 >= e2 for e1, e2 in zip(errs, errs[1:])), errs

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(0)
        worst_asym, worst_neg = 0.0, 0.0
        for _ in range(60):
            a = rng.random((10, 3))
            b = rng.random((10, 3))
            s1 = sinkhorn_distance(a, b, BOX, tol=1e-9, max_iters=3000).value
            s2 = sinkhorn_distance(b, a, BOX, tol=1e-9, max_iters=3000).value
            worst_asym = max(worst_asym, abs(s1 - s2))
            worst_neg = min(worst_neg, s1)
        assert worst_asym < 1e-9
        assert worst_neg > -1e-9

    def test_permutation_invariance(self, rng):
        a = rng.random((12, 3))
        b = rng.random((12, 3))
        s0 = sinkhorn_distance(a, b, BOX, tol=1e-9, max_iters=3000).value
        s1 = sinkhorn_distance(
            a[rng.permutation(12)], b[rng.permutation(12)], BOX, tol=1e-9, max_iters=3000
        ).value
        assert abs(s0 - s1) < 1e-9

    def test_nonconvergence_reported_not_raised(self, rng):
        a = rng.random((15, 3))
        b = rng.random((15, 3))
        r = sinkhorn_distance(a, b, BOX, eps=1e-6, max_iters=2, tol=1e-14)
        assert not r.converged

    def test_invalid_eps(self, rng):
        with pytest.raises(ValueError):
            sinkhorn_distance(np.zeros((2, 3)), np.zeros((2, 3)), BOX, eps=0.0)


class TestExactOT:
    def test_identical_sets(self, rng):
        a = rng.random((5, 3))
        assert exact_ot(a, a, BOX) == 0.0

    def test_label_invariance(self, rng):
        a = rng.random((6, 3))
        b = a[rng.permutation(6)]
        assert exact_ot(a, b, BOX) < 1e-14

    def test_size_limit(self, rng):
        with pytest.raises(ValueError):
            exact_ot(rng.random((9, 3)), rng.random((9, 3)), BOX)

    def test_uses_minimum_image(self):
        a = np.array([[0.99, 0.5, 0.5]])
        b = np.array([[0.01, 0.5, 0.5]])
        np.testing.assert_allclose(exact_ot(a, b, BOX), 0.02**2)


class TestEvalReport:
    def test_self_evaluation_is_zero(self, rng):
        frames = rng.random((10, 20, 3))
        rep = evaluate_rollout(frames, frames, BOX, 0.01, 1.0 / 20, first_step=2)
        assert rep.mse_p_mean == 0.0
        assert rep.mse_ekin == 0.0
        assert abs(rep.sinkhorn_mean) < 1e-9
        assert len(rep.mse_p) == 8

    def test_summary_keys(self, rng):
        frames = rng.random((5, 8, 3))
        rep = evaluate_rollout(frames, frames, BOX, 0.01, 0.1, first_step=1)
        assert set(rep.summary()) == {"mse_p", "mse_ekin", "sinkhorn_mean"}
