import numpy as np
import pytest

from ibkit.ib import (IBProblem, InfoCurve, curve_concavity_violation, curve_slopes,
                      fit_beta_star, geometric_betas, ib_iterate, initial_solution, solve_ib,
                      sweep_info_curve)
from ibkit.prob import JointDistribution, bayes_invert, mutual_information
from oracles import ib_naive


def random_problem(rng, nx, ny, nt=None, conc=1.0):
    j = rng.dirichlet(np.full(nx * ny, conc)).reshape(nx, ny)
    return IBProblem(JointDistribution(j), nt)


def two_cluster_problem():
    rows = np.array([[0.9, 0.1], [0.85, 0.15], [0.1, 0.9], [0.15, 0.85]])
    return IBProblem(JointDistribution(rows / 4))


class TestIterate:
    def test_beta_zero_gives_marginal_rows(self):
        rng = np.random.default_rng(0)
        p = random_problem(rng, 6, 3)
        s = initial_solution(p, 0.0, seed=1)
        nxt = ib_iterate(p, s)
        np.testing.assert_allclose(nxt.encoder, np.tile(s.marginal_t, (6, 1)), atol=1e-15)
        assert nxt.i_x == pytest.approx(0.0, abs=1e-14)

    def test_fixed_point(self):
        rng = np.random.default_rng(1)
        p = random_problem(rng, 6, 4)
        s = solve_ib(p, 4.0, init_seed=3, tol=1e-15, max_iter=20000)
        nxt = ib_iterate(p, s)
        np.testing.assert_allclose(nxt.encoder, s.encoder, atol=1e-9)
        np.testing.assert_allclose(nxt.functional, s.functional, atol=1e-12)

    def test_monotone_functional(self):
        rng = np.random.default_rng(2)
        p = random_problem(rng, 8, 4)
        for seed in range(100):
            s = initial_solution(p, 5.0, seed=seed)
            for _ in range(30):
                nxt = ib_iterate(p, s)
                assert nxt.functional <= s.functional + 1e-12
                s = nxt

    def test_consistency(self):
        rng = np.random.default_rng(3)
        p = random_problem(rng, 5, 3)
        s = ib_iterate(p, initial_solution(p, 2.0, seed=0))
        post, pt = bayes_invert(p.px, s.encoder)
        np.testing.assert_allclose(pt.probs, s.marginal_t, atol=1e-12)
        np.testing.assert_allclose(post.rows @ p.pyx, s.decoder, atol=1e-12)

    def test_large_beta_no_underflow(self):
        rng = np.random.default_rng(4)
        p = random_problem(rng, 6, 3)
        s = ib_iterate(p, initial_solution(p, 1e6, seed=0))
        assert np.all(np.isfinite(s.encoder))
        np.testing.assert_allclose(s.encoder.sum(1), 1.0)

    def test_shape_mismatch(self):
        p = two_cluster_problem()
        s = initial_solution(IBProblem(p.joint, 2), 1.0, seed=0)
        with pytest.raises(ValueError):
            ib_iterate(p, s)


class TestSolve:
    def test_beta_zero(self):
        p = random_problem(np.random.default_rng(5), 5, 5)
        s = solve_ib(p, 0.0)
        assert s.i_x == pytest.approx(0.0, abs=1e-12)
        assert s.i_y == pytest.approx(0.0, abs=1e-12)

    def test_large_beta_reaches_sufficiency(self):
        p = random_problem(np.random.default_rng(6), 6, 4)
        s = solve_ib(p, 1e4, init_seed=0)
        assert abs(s.i_y - p.i_xy) < 1e-3

    def test_kernel_history_monotone(self):
        p = random_problem(np.random.default_rng(7), 12, 9)
        s = solve_ib(p, 8.0, init_seed=1, record_history=True)
        assert np.all(np.diff(s.history) <= 1e-12)
        assert s.converged

    def test_matches_numpy_iteration(self):
        p = random_problem(np.random.default_rng(8), 7, 3)
        s0 = initial_solution(p, 3.0, seed=4)
        s = s0
        for _ in range(25):
            s = ib_iterate(p, s)
        k = solve_ib(p, 3.0, tol=0.0, max_iter=25, init=s0.encoder)
        np.testing.assert_allclose(k.encoder, s.encoder, atol=1e-12)

    def test_restart_oracle(self):
        rng = np.random.default_rng(9)
        p = random_problem(rng, 16, 4)
        ours = min(solve_ib(p, 10.0, init_seed=s).functional for s in range(20))
        ref = min(ib_naive.run(p.joint.table, 10.0, 16, seed=100 + s) for s in range(20))
        assert abs(ours - ref) < 1e-6

    def test_nonconvergence_flagged(self):
        p = random_problem(np.random.default_rng(10), 8, 4)
        s = solve_ib(p, 3.0, max_iter=2, tol=0.0)
        assert not s.converged
        assert s.iterations == 2

    def test_invariants(self):
        p = random_problem(np.random.default_rng(11), 9, 5)
        s = solve_ib(p, 6.0)
        assert s.i_x >= 0 and 0 <= s.i_y <= p.i_xy + 1e-12
        _, pt = bayes_invert(p.px, s.encoder)
        np.testing.assert_allclose(pt.probs, s.marginal_t, atol=1e-8)


class TestSweep:
    def test_single_zero_beta(self):
        c = sweep_info_curve(two_cluster_problem(), [0.0])
        assert c.points == [(0.0, 0.0, 0.0)] or np.allclose(c.points[0], 0.0, atol=1e-12)

    def test_kink_two_clusters(self):
        p = two_cluster_problem()
        betas = geometric_betas(0.5, 100, 1.15)
        c = sweep_info_curve(p, betas, restarts=2)
        occ = [s.occupied() for s in c.solutions]
        assert occ[0] == 1
        assert 2 in occ
        assert occ == sorted(occ)

    def test_concave_monotone_slopes(self):
        rng = np.random.default_rng(12)
        betas = geometric_betas(0.5, 200, 1.07)
        for _ in range(5):
            p = random_problem(rng, 10, 6)
            c = sweep_info_curve(p, betas, restarts=1)
            assert curve_concavity_violation(c.i_x, c.i_y) < 1e-6
            assert np.all(np.diff(c.i_x) >= -1e-6) and np.all(np.diff(c.i_y) >= -1e-6)
            assert np.all(c.i_y <= p.i_xy + 1e-12)
            for b, slope in curve_slopes(c):
                assert abs(slope * b - 1) < 0.1

    def test_rejects_descending(self):
        with pytest.raises(ValueError):
            sweep_info_curve(two_cluster_problem(), [2.0, 1.0])

    def test_csv_roundtrip(self, tmp_path):
        c = sweep_info_curve(two_cluster_problem(), [0.5, 2.0, 8.0])
        c.to_csv(tmp_path / "c.csv")
        back = InfoCurve.from_csv(tmp_path / "c.csv")
        assert back.points == c.points
        assert back.converged == c.converged
        assert open(tmp_path / "c.csv").readline().strip() == "beta,i_x_bits,i_y_bits,converged"


class TestBetaStar:
    def test_planted_optimum(self):
        p = random_problem(np.random.default_rng(13), 8, 3, conc=0.3)
        s = solve_ib(p, 3.0, tol=1e-14, max_iter=20000)
        assert s.i_x > 0.1
        grid = [1.0, 2.0, 3.0, 4.0, 6.0]
        b, kl = fit_beta_star(s.encoder, s.decoder, p, grid)
        assert b == 3.0
        assert kl < 1e-8

    def test_constant_encoder(self):
        p = random_problem(np.random.default_rng(14), 6, 3)
        enc = np.full((6, 4), 0.25)
        dec = np.tile(p.joint.marginal_y(), (4, 1))
        b, kl = fit_beta_star(enc, dec, p, [0.5, 1.0, 2.0])
        assert b == 0.5
        assert kl == pytest.approx(0.0, abs=1e-12)

    def test_errors(self):
        p = two_cluster_problem()
        with pytest.raises(ValueError):
            fit_beta_star(np.eye(4), np.full((4, 2), 0.5), p, [])
        with pytest.raises(ValueError):
            fit_beta_star(np.eye(4), np.full((3, 2), 0.5), p, [1.0])
