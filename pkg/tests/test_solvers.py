import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpflow.flow import FlowLayer, inverse
from cpflow.icnn import ICNNConfig, potential
from cpflow import autodiff as ad
from cpflow.solvers import (
    IndefiniteError,
    NumericalBreakdown,
    SolverReport,
    _quadrature_logdet,
    conjugate_gradient,
    exact_logdet,
    hutchinson_probe,
    lanczos,
    lbfgs_minimize,
    rademacher,
    slq_logdet,
)


def wishart(d, dof, rng):
    G = rng.normal(size=(dof, d))
    return G.T @ G


def spd_with_spectrum(lam, rng):
    Q, _ = np.linalg.qr(rng.normal(size=(len(lam), len(lam))))
    return (Q * lam) @ Q.T


def matvec(A):
    return lambda v: v @ A.T


class TestConjugateGradient:
    def test_identity_one_iteration(self, rng):
        v = rng.normal(size=7)
        z, rep = conjugate_gradient(lambda p: p, v, atol=1e-12)
        np.testing.assert_allclose(z, v)
        assert rep.iterations == 1 and rep.converged

    def test_two_by_two(self):
        z, rep = conjugate_gradient(matvec(np.array([[4.0, 1.0], [1.0, 3.0]])), np.array([1.0, 2.0]), atol=1e-12)
        np.testing.assert_allclose(z, [1 / 11, 7 / 11], rtol=1e-12)
        assert rep.iterations <= 2

    def test_wishart_43_terminates(self, rng):
        A = wishart(43, 86, rng) / 43
        z, rep = conjugate_gradient(matvec(A), rng.normal(size=43), atol=1e-7)
        assert rep.converged and rep.iterations <= 43

    def test_batched_rows_independent(self, rng):
        A = wishart(5, 8, rng)
        V = rng.normal(size=(3, 5))
        Z, rep = conjugate_gradient(matvec(A), V, atol=1e-10)
        for i in range(3):
            zi, _ = conjugate_gradient(matvec(A), V[i], atol=1e-10)
            np.testing.assert_allclose(Z[i], zi, rtol=1e-9, atol=1e-12)
        assert rep.per_sample_iterations.shape == (3,)

    def test_reported_residual_meets_tolerance(self, rng):
        A = wishart(10, 12, rng)
        v = rng.normal(size=10)
        z, rep = conjugate_gradient(matvec(A), v, atol=1e-6)
        assert rep.converged and rep.residual_inf < 1e-6
        assert np.abs(A @ z - v).max() < 1e-6
        assert rep.hvp_calls >= rep.iterations

    def test_geometric_error_decay(self, rng):
        A = spd_with_spectrum(np.linspace(1, 10, 30), rng)
        v = rng.normal(size=30)
        zstar = np.linalg.solve(A, v)
        errs = []
        for k in range(1, 15):
            z, _ = conjugate_gradient(matvec(A), v, atol=1e-300, max_iter=k)
            e = z - zstar
            errs.append(np.sqrt(e @ A @ e))
        slope = np.polyfit(np.arange(1, 15), np.log(errs), 1)[0]
        assert slope < 0
        assert np.all(np.diff(errs) <= 1e-12)

    def test_indefinite_breakdown(self):
        with pytest.raises(NumericalBreakdown):
            conjugate_gradient(matvec(np.diag([1.0, -1.0])), np.array([0.0, 1.0]), atol=1e-10)

    def test_bad_atol(self):
        with pytest.raises(ValueError):
            conjugate_gradient(lambda p: p, np.ones(2), atol=0.0)

    @pytest.mark.parametrize("d", [2, 8, 16, 64])
    def test_iterations_capped_by_dim(self, d, rng):
        A = wishart(d, 2 * d, rng)
        _, rep = conjugate_gradient(matvec(A), rng.normal(size=d), atol=1e-7)
        assert rep.converged and rep.iterations <= d


class TestLBFGS:
    def test_shifted_quadratic(self):
        a = np.array([1.0, 2.0, 3.0])
        x, rep = lbfgs_minimize(lambda x: (0.5 * np.sum((x - a) ** 2), x - a), np.zeros(3), grad_tol=1e-10)
        np.testing.assert_allclose(x, a, atol=1e-8)
        assert rep.converged

    def test_quadratic_within_3d(self, rng):
        d = 12
        A = spd_with_spectrum(np.linspace(1, 20, d), rng)
        b = rng.normal(size=d)
        x, rep = lbfgs_minimize(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(d), grad_tol=1e-10, max_iter=3 * d)
        assert rep.converged and rep.iterations <= 3 * d
        np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-8)

    def test_identity_flow_inversion(self, rng):
        layer = FlowLayer.scaled_identity(ICNNConfig(input_dim=4, depth=2, width=4))
        y = rng.normal(size=(3, 4))
        x, rep = inverse(layer, y)
        np.testing.assert_allclose(x, y, atol=1e-12)
        assert rep.iterations <= 1

    def test_random_icnn_inversion(self, rng):
        config = ICNNConfig(input_dim=8, depth=2, width=16)
        layer = FlowLayer.random(config, seed=3)
        y = rng.normal(size=(1, 8))

        def objective(x):
            xn = ad.variable(x)
            F = ad.total(potential(layer.params, config, xn))
            (g,) = ad.gradient(F, [xn])
            return F.value - float(np.sum(y * x)), g.value - y

        x, rep = lbfgs_minimize(objective, y.copy(), grad_tol=1e-6, max_iter=200)
        assert rep.converged and rep.iterations <= 200
        assert np.abs(objective(x)[1]).max() <= 1e-6


class TestProbes:
    def test_entries_are_signs(self):
        v = hutchinson_probe(11, 1000)
        assert set(np.unique(v)) == {-1.0, 1.0}

    def test_reproducible(self):
        np.testing.assert_array_equal(hutchinson_probe(5, 50), hutchinson_probe(5, 50))
        assert not np.array_equal(hutchinson_probe(5, 50), hutchinson_probe(6, 50))

    def test_rows_depend_only_on_own_key(self):
        a = rademacher((1, 2, 3), 6, rows=[4, 9, 10])
        b = rademacher((1, 2, 3), 6, rows=[10])
        np.testing.assert_array_equal(a[2], b[0])

    def test_balanced(self):
        v = rademacher((0,), 64, rows=np.arange(4000))
        assert abs(v.mean()) < 3 / np.sqrt(v.size)

    def test_trace_two_by_two(self):
        A = np.array([[4.0, 1.0], [1.0, 3.0]])
        V = rademacher((42,), 2, rows=np.arange(100_000))
        q = np.einsum("ij,jk,ik->i", V, A, V)
        assert abs(q.mean() - 7.0) <= 3 * q.std(ddof=1) / np.sqrt(len(q))

    def test_hutchinson_unbiased(self, rng):
        S = rng.normal(size=(8, 8))
        A = S + S.T
        V = rademacher((7,), 8, rows=np.arange(100_000))
        q = np.einsum("ij,jk,ik->i", V, A, V)
        assert abs(q.mean() - np.trace(A)) <= 3 * q.std(ddof=1) / np.sqrt(len(q))


class TestLogDet:
    def test_exact_examples(self, rng):
        assert exact_logdet(np.eye(5)) == 0.0
        np.testing.assert_allclose(exact_logdet(np.diag([2.0, 3.0])), np.log(6.0))
        A = wishart(10, 11, rng)
        np.testing.assert_allclose(exact_logdet(A), np.log(np.linalg.eigvalsh(A)).sum(), rtol=0, atol=1e-10)

    def test_exact_batched_and_indefinite(self):
        stack = np.stack([np.eye(2), 2 * np.eye(2)])
        np.testing.assert_allclose(exact_logdet(stack), [0.0, 2 * np.log(2)])
        with pytest.raises(IndefiniteError):
            exact_logdet(np.diag([1.0, -1.0]))

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.1, 50.0), st.integers(1, 6), st.integers(1, 5))
    def test_slq_scaled_identity(self, c, d, m):
        est, _ = slq_logdet(lambda v: c * v, d, probes=3, m=m)
        np.testing.assert_allclose(est, d * np.log(c), rtol=1e-12, atol=1e-12)

    def test_slq_diag_two_three(self):
        for probes in (1, 5):
            est, _ = slq_logdet(lambda v: v * np.array([2.0, 3.0]), 2, probes=probes, m=2)
            assert abs(est - np.log(6.0)) < 1e-10

    def test_slq_accuracy_d64(self, rng):
        A = spd_with_spectrum(rng.uniform(1, 100, 64), rng)
        est, rep = slq_logdet(matvec(A), 64, probes=32, m=20, seed=1)
        assert abs(est - exact_logdet(A)) / abs(exact_logdet(A)) < 0.02
        assert rep.hvp_calls == 32 * 20

    def test_slq_probe_order_invariant(self, rng):
        A = wishart(6, 10, rng)
        est, _ = slq_logdet(matvec(A), 6, probes=5, m=4, seed=3)
        per = []
        for k in reversed(range(5)):
            v = rademacher((3, k), 6, np.arange(1))
            a, b, steps, _ = lanczos(lambda q: q @ A.T, v, 4)
            per.append(_quadrature_logdet(a, b, steps, np.einsum("ij,ij->i", v, v))[0])
        np.testing.assert_allclose(est, np.mean(per), rtol=0, atol=1e-12)

    def test_slq_batched(self, rng):
        A, B = wishart(4, 8, rng), wishart(4, 8, rng)

        def op(v):
            return np.stack([A @ v[0], B @ v[1]])

        est, _ = slq_logdet(op, 4, probes=4, m=4, batch=2, seed=9)
        # with m = d each probe's quadrature is exact for v^T log(H) v
        expected = []
        for i, M in enumerate((A, B)):
            lam, Q = np.linalg.eigh(M)
            logm = (Q * np.log(lam)) @ Q.T
            V = np.stack([rademacher((9, k), 4, [i])[0] for k in range(4)])
            expected.append(np.einsum("kd,de,ke->k", V, logm, V).mean())
        np.testing.assert_allclose(est, expected, rtol=1e-9)


class TestReport:
    def test_csv(self):
        text = SolverReport.to_csv([SolverReport("cg", 3, 1e-4, True, 3)])
        assert text.splitlines()[0] == "call_type,iterations,hvp_calls,residual_inf,converged"
        assert text.splitlines()[1].startswith("cg,3,3,")
