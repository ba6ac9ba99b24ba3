import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from amrtopo.fem import MaterialSpec, apply_constraints, assemble, recover_full
from amrtopo.linsolve import (
    SingularSystemError,
    default_maxit,
    ic0,
    minres,
    rescale,
    solve_equilibrium,
)
from amrtopo.mesh import create_uniform

from .conftest import random_adapted_mesh
from .test_fem import cantilever_bc


def laplacian_2d(m):
    t = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(m, m))
    eye = sp.identity(m)
    return (sp.kron(eye, t) + sp.kron(t, eye)).tocsr()


def random_spd(rng, n, density=0.2):
    A = sp.random(n, n, density=density, random_state=np.random.RandomState(int(rng.integers(1 << 31))))
    A = A + A.T
    return (A + sp.identity(n) * (abs(A).sum(axis=1).max() + 1.0)).tocsr()


def cantilever_system(nx=16, ny=8, rho=None, mesh=None):
    mesh = mesh or create_uniform(nx, ny, (float(nx), float(ny)))
    rho = np.full(mesh.n_active, 0.5) if rho is None else rho
    bc = cantilever_bc(*mesh.domain)
    return apply_constraints(assemble(mesh, rho, MaterialSpec(), bc))


class TestRescale:
    def test_unit_diagonal_and_symmetric(self, rng):
        K = random_spd(rng, 30)
        rs = rescale(K, np.ones(30))
        np.testing.assert_array_equal(rs.matrix.diagonal(), 1.0)
        assert abs(rs.matrix - rs.matrix.T).max() < 1e-15

    def test_solution_round_trip(self, rng):
        K = random_spd(rng, 25)
        f = rng.normal(size=25)
        rs = rescale(K, f)
        xt = np.linalg.solve(rs.matrix.toarray(), rs.rhs)
        np.testing.assert_allclose(rs.to_original(xt), np.linalg.solve(K.toarray(), f), rtol=1e-10)
        np.testing.assert_allclose(rs.to_scaled(rs.to_original(xt)), xt, rtol=1e-14)

    def test_diag_4_9(self):
        rs = rescale(sp.diags([4.0, 9.0]).tocsr(), np.array([1.0, 1.0]))
        np.testing.assert_array_equal(rs.matrix.toarray(), np.eye(2))
        np.testing.assert_allclose(rs.rhs, [1 / 2, 1 / 3])

    def test_zero_diagonal_rejected(self):
        K = sp.diags([1.0, 0.0, 2.0]).tocsr()
        with pytest.raises(SingularSystemError):
            rescale(K, np.ones(3))

    def test_reduces_condition_number(self):
        # a stiffness matrix with densities spanning the SIMP range
        mesh = create_uniform(8, 4, (8.0, 4.0))
        rho = np.where(np.arange(32) % 3 == 0, 1.0, 1e-3)
        sys = cantilever_system(mesh=mesh, rho=rho)
        K = sys.matrix.toarray()
        Kt = rescale(sys.matrix, sys.rhs).matrix.toarray()
        assert np.linalg.cond(Kt) < np.linalg.cond(K)


class TestIC0:
    def test_diagonal_is_exact(self):
        d = np.array([4.0, 9.0, 1.0])
        fac = ic0(sp.diags(d).tocsr())
        np.testing.assert_allclose(fac.L.toarray(), np.diag(np.sqrt(d)))

    def test_tridiagonal_is_exact_cholesky(self):
        A = sp.diags([-1, 4, -1], [-1, 0, 1], shape=(12, 12)).tocsr()
        fac = ic0(A)
        np.testing.assert_allclose(fac.L.toarray(), np.linalg.cholesky(A.toarray()), atol=1e-14)

    def test_pattern_subset_and_pattern_exact(self):
        A = laplacian_2d(6)
        fac = ic0(A)
        L = fac.L.toarray()
        low = np.tril(A.toarray()) != 0
        assert np.all((L != 0) <= low)
        # on the pattern, L L^T reproduces A exactly
        LLt = L @ L.T
        np.testing.assert_allclose(LLt[low], np.tril(A.toarray())[low], atol=1e-13)

    def test_apply_is_inverse_of_factor(self, rng):
        A = laplacian_2d(5)
        fac = ic0(A)
        r = rng.normal(size=25)
        L = fac.L.toarray()
        np.testing.assert_allclose(L @ (L.T @ fac.solve(r)), r, atol=1e-12)

    def test_preconditioning_helps_on_laplacian(self):
        A = laplacian_2d(4)
        b = np.ones(16)
        _, plain = minres(A.dot, None, b, tol=1e-10)
        _, pre = minres(A.dot, ic0(A).solve, b, tol=1e-10)
        assert pre.iterations < plain.iterations

    def test_nonpositive_pivot_falls_back(self, caplog):
        # symmetric with positive diagonal but indefinite
        A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
        fac = ic0(A)
        assert fac.jacobi
        np.testing.assert_allclose(fac.solve(np.array([2.0, 3.0])), [2.0, 3.0])
        assert "Jacobi" in caplog.text


class TestMinres:
    def test_identity_one_iteration(self):
        b = np.array([1.0, -2.0, 3.0])
        x, st_ = minres(lambda v: v, None, b, tol=1e-12)
        np.testing.assert_allclose(x, b)
        assert st_.iterations == 1

    def test_diag_three_iterations(self):
        d = np.array([1.0, 2.0, 3.0])
        x, st_ = minres(lambda v: d * v, None, np.ones(3), tol=1e-12)
        np.testing.assert_allclose(x, 1 / d, rtol=1e-12)
        assert st_.iterations <= 3

    def test_diag_known_solution(self):
        d = np.array([1.0, 2.0, 3.0])
        x, _ = minres(lambda v: d * v, None, d.copy(), tol=1e-12)
        np.testing.assert_allclose(x, 1.0, rtol=1e-12)

    def test_random_50_residual(self, rng):
        A = random_spd(rng, 50)
        b = rng.normal(size=50)
        tol = 1e-8
        x, st_ = minres(A.dot, ic0(A).solve, b, tol=tol)
        assert st_.final_relres <= tol
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) <= 10 * tol

    def test_zero_rhs(self):
        x, st_ = minres(lambda v: 2 * v, None, np.zeros(4), x0=np.ones(4))
        np.testing.assert_array_equal(x, 0.0)
        assert st_.iterations == 0

    def test_exact_warm_start_zero_iterations(self, rng):
        A = random_spd(rng, 20).toarray()
        b = rng.normal(size=20)
        x, st_ = minres(lambda v: A @ v, None, b, x0=np.linalg.solve(A, b), tol=1e-8)
        assert st_.iterations == 0

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(2, 60))
    def test_random_spd_matches_dense(self, seed, n):
        rng = np.random.default_rng(seed)
        A = random_spd(rng, n)
        b = rng.normal(size=n)
        fac = ic0(A)
        x, st_ = minres(A.dot, fac.solve, b, tol=1e-12, maxit=10 * n)
        assert st_.converged
        ref = np.linalg.solve(A.toarray(), b)
        np.testing.assert_allclose(x, ref, rtol=1e-8, atol=1e-10 * np.abs(ref).max())
        h = np.array(st_.history)
        assert np.all(np.diff(h) <= 1e-12 * h[0])

    def test_history_monotone_on_stiffness(self):
        sys = cantilever_system(32, 16)
        rs = rescale(sys.matrix, sys.rhs)
        _, st_ = minres(rs.matrix.dot, ic0(rs.matrix).solve, rs.rhs, tol=1e-10, maxit=2000)
        h = np.array(st_.history)
        assert np.all(np.diff(h) <= 0.0)

    def test_maxit_reported_not_converged(self):
        A = laplacian_2d(10)
        _, st_ = minres(A.dot, None, np.ones(100), tol=1e-14, maxit=3)
        assert st_.iterations == 3 and not st_.converged


class TestSolveEquilibrium:
    def test_matches_dense_on_uniform(self):
        sys = cantilever_system(16, 8)
        u, st_ = solve_equilibrium(sys, tol=1e-12)
        ref = np.linalg.solve(sys.matrix.toarray(), sys.rhs)
        assert st_.converged
        np.testing.assert_allclose(u, ref, rtol=1e-8, atol=1e-8 * np.abs(ref).max())

    def test_matches_dense_on_adapted(self, rng):
        mesh = random_adapted_mesh(rng, passes=4)
        rho = rng.uniform(0.05, 1.0, mesh.n_active)
        sys = cantilever_system(mesh=mesh, rho=rho)
        u, _ = solve_equilibrium(sys, tol=1e-12)
        ref = recover_full(sys, np.linalg.solve(sys.matrix.toarray(), sys.rhs))
        np.testing.assert_allclose(u, ref, rtol=1e-8, atol=1e-8 * np.abs(ref).max())

    def test_warm_start_saves_iterations(self, rng):
        mesh = create_uniform(32, 16, (2.0, 1.0))
        rho = rng.uniform(0.3, 1.0, mesh.n_active)
        u0, cold0 = solve_equilibrium(cantilever_system(mesh=mesh, rho=rho))
        # a small design perturbation, as between two optimization steps
        rho2 = np.clip(rho * (1 + 0.02 * rng.normal(size=rho.size)), 1e-3, 1.0)
        sys2 = cantilever_system(mesh=mesh, rho=rho2)
        _, cold = solve_equilibrium(sys2)
        _, warm = solve_equilibrium(sys2, warm=u0)
        assert warm.iterations <= cold.iterations
        assert warm.iterations < cold.iterations

    def test_requires_reduced_system(self):
        mesh = create_uniform(2, 1, (2.0, 1.0))
        sys = assemble(mesh, np.ones(2), MaterialSpec(), cantilever_bc(2.0, 1.0))
        with pytest.raises(ValueError):
            solve_equilibrium(sys)

    def test_default_maxit(self):
        assert default_maxit(100) == 1000
        assert default_maxit(1_000_000) == 10_000
