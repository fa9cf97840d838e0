import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iqcsyn.errors import (
    FrequencyIdentityViolatedError,
    InstabilityError,
    SpectrumOnCircleError,
)
from iqcsyn.matrixeq import (
    DareData,
    solve_dare,
    solve_generalized_stein,
    solve_stein,
    split_indefinite,
)


def random_dare_instance(rng, n, m, max_tries=50):
    """Well-posed controllable instance with [Q S; S' R] = [C D]' M [C D], M > 0.

    Positive M keeps the associated spectrum positive on the circle, so
    both the stabilizing and the unmixed solution exist.  Draws are
    rejected while either region-selected solution is too ill-conditioned
    to certify the residual bound (solutions near the singular-inner-term
    manifold blow up in norm and carry no 1e-8 residual in doubles).
    """
    for _ in range(max_tries):
        A = rng.standard_normal((n, n))
        A *= rng.uniform(0.3, 1.6) / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
        B = rng.standard_normal((n, m))
        r = n + m
        C = rng.standard_normal((r, n))
        D = rng.standard_normal((r, m))
        Mh = rng.standard_normal((r, r))
        M = Mh @ Mh.T + 0.5 * np.eye(r)
        CD = np.hstack([C, D])
        QSR = CD.T @ M @ CD
        data = DareData(A, B, QSR[:n, :n], QSR[n:, n:], QSR[:n, n:])
        try:
            for mode in ("stabilizing", "unmixed"):
                sol = solve_dare(data, mode)
                if np.linalg.norm(sol.Z) > 1e5 or sol.inner_condition > 1e9:
                    raise RuntimeError("ill-scaled draw")
        except Exception:
            continue
        return data
    raise RuntimeError("could not draw a well-posed DARE instance")


class TestSolveDare:
    def test_scalar_oracle(self):
        # scalar quadratic -Z^2 + 0.25 Z + 1 = 0 with stability-selected root
        data = DareData([[0.5]], [[1.0]], [[1.0]], [[1.0]], [[0.0]])
        sol = solve_dare(data, "stabilizing")
        assert sol.Z[0, 0] == pytest.approx((0.25 + np.sqrt(4.0625)) / 2, abs=1e-10)
        assert sol.closed_spectrum[0].real == pytest.approx(0.2344355, abs=1e-6)
        assert sol.residual(data) < 1e-10

    def test_scalar_unmixed(self):
        data = DareData([[0.5]], [[1.0]], [[1.0]], [[1.0]], [[0.0]])
        sol = solve_dare(data, "unmixed")
        # pencil eigenvalues are 0.2344 and 1/0.2344; unmixed picks the outer one
        assert abs(sol.closed_spectrum[0]) > 1.0
        assert sol.residual(data) < 1e-9

    def test_zero_dynamics_collapse(self):
        for q in (0.5, 2.0, -0.5):
            data = DareData([[0.0]], [[1.0]], [[q]], [[1.0]], [[0.0]])
            for mode in ("stabilizing", "unmixed"):
                sol = solve_dare(data, mode)
                assert sol.Z[0, 0] == pytest.approx(q, abs=1e-10)
                assert abs(sol.closed_spectrum[0]) < 1e-8

    def test_circle_eigenvalue_rejected(self):
        # A = 1, B = 0-ish coupling creates a unit-circle pencil eigenvalue:
        # construct directly with Q = 0, R = 1, S = 0, A = 1 (pole at 1)
        data = DareData([[1.0]], [[1.0]], [[0.0]], [[1.0]], [[0.0]])
        with pytest.raises(SpectrumOnCircleError):
            solve_dare(data, "stabilizing")

    def test_uncontrollable_rejected(self):
        data = DareData(np.diag([0.5, 0.6]), [[1.0], [0.0]], np.eye(2), [[1.0]], [[0.0], [0.0]])
        with pytest.raises(ValueError):
            solve_dare(data)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_random_instances_both_modes(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, 3))
        data = random_dare_instance(rng, n, m)
        for mode in ("stabilizing", "unmixed"):
            sol = solve_dare(data, mode)
            assert sol.residual(data) < 1e-8 * (1.0 + np.linalg.norm(sol.Z))
            assert np.max(np.abs(sol.Z - sol.Z.T)) < 1e-10 * (1 + np.max(np.abs(sol.Z)))
            mods = np.abs(sol.closed_spectrum)
            if mode == "stabilizing":
                assert np.all(mods < 1.0)
            else:
                assert np.all((mods <= 1e-6) | (mods > 1.0))

    def test_modes_give_mirrored_spectra(self):
        rng = np.random.default_rng(123)
        data = random_dare_instance(rng, 3, 2)
        st_sol = solve_dare(data, "stabilizing")
        un_sol = solve_dare(data, "unmixed")
        # nonzero closed-loop eigenvalues come in lambda <-> 1/conj(lambda) pairs
        s = np.sort_complex(st_sol.closed_spectrum)
        u = np.sort_complex(1.0 / np.conj(un_sol.closed_spectrum))
        assert np.max(np.abs(s - u)) < 1e-6 * max(1.0, np.max(np.abs(s)))

    def test_stabilizing_matches_scipy(self):
        import scipy.linalg as sla
        rng = np.random.default_rng(7)
        for _ in range(10):
            n, m = int(rng.integers(1, 5)), int(rng.integers(1, 3))
            A = rng.standard_normal((n, n)) * 0.6
            B = rng.standard_normal((n, m))
            Qh = rng.standard_normal((n, n))
            Q = Qh @ Qh.T + np.eye(n)
            R = np.eye(m)
            data = DareData(A, B, Q, R, np.zeros((n, m)))
            Z_ref = sla.solve_discrete_are(A, B, Q, R)
            sol = solve_dare(data, "stabilizing")
            assert np.max(np.abs(sol.Z - Z_ref)) < 1e-7 * (1 + np.max(np.abs(Z_ref)))


class TestSolveStein:
    def test_scalar(self):
        Z = solve_stein([[0.5]], [[3.0]])
        assert Z[0, 0] == pytest.approx(4.0, abs=1e-12)

    def test_zero_A(self):
        rng = np.random.default_rng(0)
        Q = rng.standard_normal((3, 3))
        Q = Q + Q.T
        Z = solve_stein(np.zeros((3, 3)), Q)
        assert np.max(np.abs(Z - Q)) < 1e-12

    def test_unstable_raises(self):
        with pytest.raises(InstabilityError):
            solve_stein([[1.0]], [[1.0]])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_series_oracle(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((4, 4))
        A *= 0.7 / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
        Qh = rng.standard_normal((4, 4))
        Q = Qh + Qh.T
        Z = solve_stein(A, Q)
        series = np.zeros((4, 4))
        P = np.eye(4)
        for _ in range(200):
            series += P.T @ Q @ P
            P = A @ P
        assert np.max(np.abs(Z - series)) < 1e-9 * (1 + np.max(np.abs(Z)))


def kernel_cross_instance(rng, n1, n2, a_out, b_out):
    """Two stable systems whose outputs live in M-orthogonal subspaces."""
    M = np.diag(np.concatenate([np.ones(a_out), -np.ones(b_out)]))
    E1 = np.vstack([np.eye(a_out), np.zeros((b_out, a_out))])
    E2 = np.vstack([np.zeros((a_out, b_out)), np.eye(b_out)])

    def stable(n, p_in, p_out):
        A = rng.standard_normal((n, n))
        A *= 0.7 / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
        B = rng.standard_normal((n, p_in))
        C = rng.standard_normal((p_out, n))
        D = rng.standard_normal((p_out, p_in))
        return A, B, C, D

    A1, B1, C1, D1 = stable(n1, 2, a_out)
    A2, B2, C2, D2 = stable(n2, 2, b_out)
    return (A1, B1, E1 @ C1, E1 @ D1), (A2, B2, E2 @ C2, E2 @ D2), M


class TestGeneralizedStein:
    def test_static_case(self):
        rng = np.random.default_rng(1)
        (A1, B1, C1, D1), (A2, B2, C2, D2), M = kernel_cross_instance(rng, 2, 3, 2, 2)
        Z = solve_generalized_stein(np.zeros((2, 2)), B1, C1, D1,
                                    np.zeros((3, 3)), B2, C2, D2, M)
        assert np.max(np.abs(Z + C1.T @ M @ C2)) < 1e-10

    def test_scalar_closed_form(self):
        # A1 = A2 = 0.5 and C1' M C2 = c gives (0.25 - 1) Z = c
        C1 = np.array([[1.0], [0.0]])
        C2 = np.array([[0.0], [1.0]])
        M = np.diag([1.0, -1.0])
        c = (C1.T @ M @ C2)[0, 0]
        Z = solve_generalized_stein([[0.5]], np.zeros((1, 1)), C1, np.zeros((2, 1)),
                                    [[0.5]], np.zeros((1, 1)), C2, np.zeros((2, 1)), M)
        assert Z[0, 0] == pytest.approx(-4.0 * c / 3.0, abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_constructed_kernel_instances(self, seed):
        rng = np.random.default_rng(seed)
        n1 = int(rng.integers(1, 5))
        n2 = int(rng.integers(1, 5))
        (A1, B1, C1, D1), (A2, B2, C2, D2), M = kernel_cross_instance(rng, n1, n2, 3, 2)
        Z = solve_generalized_stein(A1, B1, C1, D1, A2, B2, C2, D2, M)
        scale = 1 + np.linalg.norm(Z) + np.linalg.norm(M)
        assert np.linalg.norm(A1.T @ Z @ A2 - Z - C1.T @ M @ C2) < 1e-8 * scale
        assert np.linalg.norm(A1.T @ Z @ B2 - C1.T @ M @ D2) < 1e-8 * scale
        assert np.linalg.norm(B1.T @ Z @ A2 - D1.T @ M @ C2) < 1e-8 * scale
        assert np.linalg.norm(B1.T @ Z @ B2 - D1.T @ M @ D2) < 1e-8 * scale

    def test_violated_identity_rejected(self):
        rng = np.random.default_rng(2)
        A = np.array([[0.5]])
        B = np.array([[1.0]])
        C = rng.standard_normal((2, 1))
        D = rng.standard_normal((2, 1))
        M = np.eye(2)
        with pytest.raises(FrequencyIdentityViolatedError):
            solve_generalized_stein(A, B, C, D, A, B, C, D, M)


class TestSplitIndefinite:
    def test_diagonal(self):
        L1, L2 = split_indefinite(np.diag([2.0, -3.0]))
        assert np.allclose(L1, [[np.sqrt(2.0), 0.0]])
        assert np.allclose(np.abs(L2), [[0.0, np.sqrt(3.0)]])

    def test_psd_gives_empty_L2(self):
        rng = np.random.default_rng(3)
        Xh = rng.standard_normal((4, 4))
        X = Xh @ Xh.T
        L1, L2 = split_indefinite(X)
        assert L2.shape[0] == 0
        assert np.max(np.abs(L1.T @ L1 - X)) < 1e-10 * (1 + np.max(np.abs(X)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_random_reconstruction(self, seed):
        rng = np.random.default_rng(seed)
        Xh = rng.standard_normal((6, 6))
        X = Xh + Xh.T
        L1, L2 = split_indefinite(X)
        recon = L1.T @ L1 - L2.T @ L2
        assert np.max(np.abs(recon - X)) < 1e-10 * (1 + np.max(np.abs(X)))
        lam = np.linalg.eigvalsh(X)
        cut = 1e-9 * np.max(np.abs(lam))
        assert L1.shape[0] == int(np.sum(lam > cut))
        assert L2.shape[0] == int(np.sum(lam < -cut))
