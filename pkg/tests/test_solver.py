"""CG behavior: exact solves against LU, residual bookkeeping, flop totals."""

import warnings

import numpy as np
import pytest

from wilsoncg import algebra, bench, comm, geometry, hopping, solver
from wilsoncg.geometry import Parity
from wilsoncg.hopping import HoppingParams, WilsonHopping
from wilsoncg.solver import CGConfig, cg_solve, true_residual

from conftest import dense_normal, dense_preconditioned, single_rank, to_vec


class TestConfig:
    def test_defaults(self):
        cfg = CGConfig()
        assert cfg.tol == 1e-8
        assert cfg.max_iter == 10_000

    @pytest.mark.parametrize("tol", [0.0, 1.0, -1e-8, 2.0])
    def test_rejects_bad_tol(self, tol):
        with pytest.raises(ValueError, match="tol"):
            CGConfig(tol=tol)

    def test_rejects_bad_max_iter(self):
        with pytest.raises(ValueError, match="max_iter"):
            CGConfig(max_iter=0)


class TestExactCases:
    def test_kappa_zero_solves_in_one_iteration(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 5)
        b = algebra.random_fermion(dec, Parity.EVEN, 5)
        res = cg_solve(gauge, b, HoppingParams(kappa=0.0))
        assert res.converged
        assert res.iterations == 1
        assert res.residual_history == [1.0, 0.0]
        np.testing.assert_array_equal(res.solution.data, b.data)

    @pytest.mark.parametrize("kind", ["unit", "random"])
    def test_matches_dense_lu(self, kind):
        dec = single_rank((4, 4, 4, 4))
        gauge = (algebra.unit_gauge(dec) if kind == "unit"
                 else algebra.random_gauge(dec, 41))
        params = HoppingParams(kappa=0.14)
        b = algebra.random_fermion(dec, Parity.EVEN, 42)
        res = cg_solve(gauge, b, params, CGConfig(tol=1e-10))
        assert res.converged

        a = dense_normal(gauge, params.kappa, params.phases)
        m = dense_preconditioned(gauge, params.kappa, params.phases)
        want = np.linalg.solve(a, np.conj(m.T) @ to_vec(b))
        err = np.linalg.norm(to_vec(res.solution) - want) / np.linalg.norm(want)
        assert err <= 1e-6

    def test_certified_residual_after_convergence(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 7)
        params = HoppingParams()
        b = algebra.random_fermion(dec, Parity.EVEN, 8)
        tol = 1e-10
        res = cg_solve(gauge, b, params, CGConfig(tol=tol))
        assert res.converged
        assert res.residual_history[-1] <= tol
        assert true_residual(gauge, res.solution, b, params) <= 2 * tol

    def test_true_residual_of_zero_guess_is_one(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 7)
        b = algebra.random_fermion(dec, Parity.EVEN, 8)
        zero = algebra.zeros_like(b)
        assert true_residual(gauge, zero, b) == 1.0


class TestFailureModes:
    def test_zero_rhs(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 1)
        zero = algebra.FermionField(dec, Parity.EVEN)
        with pytest.raises(solver.ZeroRhs, match="rhs has zero norm"):
            cg_solve(gauge, zero)
        x = algebra.random_fermion(dec, Parity.EVEN, 1)
        with pytest.raises(solver.ZeroRhs):
            true_residual(gauge, x, zero)

    def test_zero_preconditioned_rhs(self):
        # At kappa = 1/8 with unit links and periodic phases the constant
        # mode is annihilated exactly, so M^dag b vanishes for b = psi0.
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.unit_gauge(dec)
        b = algebra.FermionField(dec, Parity.EVEN)
        b.data[...] = 1.0
        b._bump()
        params = HoppingParams(kappa=0.125, phases=(1, 1, 1, 1))
        with pytest.raises(solver.ZeroRhs, match="preconditioned rhs"):
            cg_solve(gauge, b, params)

    def test_odd_rhs_rejected(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 1)
        odd = algebra.random_fermion(dec, Parity.ODD, 1)
        with pytest.raises(hopping.ParityMismatch, match="even"):
            cg_solve(gauge, odd)

    def test_non_psd_operator_breaks_down(self):
        dec = single_rank((4, 4, 4, 4))
        b = algebra.random_fermion(dec, Parity.EVEN, 2)

        class NegatedOperator:
            topo = comm.build_topology((1, 1, 1, 1), 0)
            transport = comm.SerialTransport()
            flops = hopping.FlopCounter()

            def apply_preconditioned(self, x, dagger=False, refresh_halo=True):
                return algebra.copy(x)

            def apply_normal(self, x, refresh_halo=True):
                return algebra.scale(-1.0, x)

        with pytest.raises(solver.BreakdownPAp, match="not PSD"):
            cg_solve(None, b, operator=NegatedOperator())

    def test_max_iter_returns_best_iterate(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 3)
        b = algebra.random_fermion(dec, Parity.EVEN, 3)
        res = cg_solve(gauge, b, config=CGConfig(max_iter=3))
        assert not res.converged
        assert res.iterations == 3
        assert len(res.residual_history) == 4
        assert 0 < res.residual_history[-1] < 1

    def test_residual_drift_warning(self):
        dec = single_rank((4, 4, 4, 4))
        b = algebra.random_fermion(dec, Parity.EVEN, 4)

        class InconsistentOperator:
            """Recursion sees the identity; the true residual sees 3x."""

            topo = comm.build_topology((1, 1, 1, 1), 0)
            transport = comm.SerialTransport()
            flops = hopping.FlopCounter()
            normal_calls = 0

            def apply_preconditioned(self, x, dagger=False, refresh_halo=True):
                return algebra.copy(x)

            def apply_normal(self, x, refresh_halo=True):
                self.normal_calls += 1
                if self.normal_calls == 1:
                    return algebra.copy(x)
                return algebra.scale(3.0, x)

        with pytest.warns(RuntimeWarning, match="hides true residual"):
            res = cg_solve(None, b, config=CGConfig(max_iter=3),
                           operator=InconsistentOperator())
        assert not res.converged


class TestBookkeeping:
    def test_flops_match_closed_form_converged(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 5)
        b = algebra.random_fermion(dec, Parity.EVEN, 5)
        res = cg_solve(gauge, b)
        assert res.converged and res.iterations < 100
        want = bench.cg_solve_flops(dec.global_volume, res.iterations,
                                    refreshes=1, converged=True)
        assert res.flops == want

    def test_flops_match_closed_form_capped(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 5)
        b = algebra.random_fermion(dec, Parity.EVEN, 5)
        res = cg_solve(gauge, b, config=CGConfig(max_iter=3))
        want = bench.cg_solve_flops(dec.global_volume, 3,
                                    refreshes=1, converged=False)
        assert res.flops == want

    def test_history_shape_and_monotonicity(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 6)
        b = algebra.random_fermion(dec, Parity.EVEN, 6)
        res = cg_solve(gauge, b)
        h = res.residual_history
        assert len(h) == res.iterations + 1
        assert h[0] == 1.0
        for prev, cur in zip(h, h[1:]):
            assert cur <= prev * (1 + 1e-13)

    def test_iterate_hook_sees_every_iteration(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 6)
        b = algebra.random_fermion(dec, Parity.EVEN, 6)
        seen = []
        res = cg_solve(gauge, b, iterate_hook=lambda k, x: seen.append(k))
        assert seen == list(range(1, res.iterations + 1))

    def test_energy_norm_error_non_increasing(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 9)
        params = HoppingParams(kappa=0.14)
        b = algebra.random_fermion(dec, Parity.EVEN, 9)
        a = dense_normal(gauge, params.kappa, params.phases)
        m = dense_preconditioned(gauge, params.kappa, params.phases)
        star = np.linalg.solve(a, np.conj(m.T) @ to_vec(b))

        energies = []

        def hook(k, x):
            e = to_vec(x) - star
            energies.append(float(np.real(np.conj(e) @ (a @ e))))

        cg_solve(gauge, b, params, iterate_hook=hook)
        for prev, cur in zip(energies, energies[1:]):
            assert cur <= prev * (1 + 1e-10)

    def test_elapsed_positive(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 5)
        b = algebra.random_fermion(dec, Parity.EVEN, 5)
        res = cg_solve(gauge, b)
        assert res.elapsed_s > 0

    def test_width_does_not_change_history(self):
        dec = single_rank((4, 4, 4, 4))
        gauge = algebra.random_gauge(dec, 5)
        b = algebra.random_fermion(dec, Parity.EVEN, 5)
        base = cg_solve(gauge, b, width=1)
        wide = cg_solve(gauge, b, width=4)
        assert wide.residual_history == base.residual_history
        np.testing.assert_array_equal(wide.solution.data, base.solution.data)


class TestRankInvariance:
    def test_two_ranks_reproduce_serial_solve(self):
        gdims = (4, 4, 4, 8)
        seed = 17
        ref = cg_solve(
            algebra.random_gauge(single_rank(gdims), seed),
            algebra.random_fermion(single_rank(gdims), Parity.EVEN, seed),
        )
        dec = geometry.decompose(gdims, (2, 1, 1, 1))

        def worker(rank, topo, transport):
            gauge = algebra.random_gauge(dec, seed, rank=rank)
            b = algebra.random_fermion(dec, Parity.EVEN, seed, rank=rank)
            res = cg_solve(gauge, b, topo=topo, transport=transport)
            gathered = comm.gather_field(res.solution, topo, transport)
            return res, gathered

        results = comm.run_on_grid((2, 1, 1, 1), worker, timeout_s=120.0)
        for res, _ in results:
            assert res.iterations == ref.iterations
            assert res.residual_history == ref.residual_history
            assert res.flops == ref.flops
        np.testing.assert_array_equal(results[0][1].data, ref.solution.data)
