import numpy as np
import pytest

from iqcsyn.errors import AssumptionViolatedError
from iqcsyn.iqc import (
    IqcFilter,
    IqcSpec,
    check_assumption1,
    dynamic_iqc,
    factorize,
    iqc_residual,
    parametric_iqc,
    stack_iqcs,
    transform_terminal_cost,
)
from iqcsyn.sdp import SdpProblem, solve_sdp
from iqcsyn.statespace import Signal, StateSpaceModel, freqresp, lti_gain_oracle


def identity_filter_spec():
    """A static pass-through filter s = (q, p) with a placeholder class."""
    filt = IqcFilter(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((0, 1)),
                     np.zeros((2, 0)), [[1.0], [0.0]], [[0.0], [1.0]])
    from iqcsyn.iqc import MultiplierClass
    return IqcSpec(filt, MultiplierClass("static", {}, None, None))


def filtered_quadratic_response(spec, M, theta):
    """Psi(z)^H M Psi(z) on a grid (dense evaluation oracle)."""
    model = spec.filter.as_model() if isinstance(spec, IqcSpec) else spec
    out = []
    for F in freqresp(model, theta):
        H = F.conj().T @ M @ F
        out.append(0.5 * (H + H.conj().T))
    return np.array(out)


def solve_class_feasibility(spec, objective_scale=1.0):
    """Pick a strictly feasible (M, X) from the spec's multiplier class."""
    prob = SdpProblem()
    M_expr, X_expr = spec.multiplier_class.generate(prob, "mx_")
    # normalization pins the homogeneous scale
    prob.add_nonneg(100.0 * objective_scale - prob.variables[next(iter(prob.variables))].expr()
                    if False else 1.0)
    sol = solve_sdp(prob)
    assert sol.status == "optimal", sol.status
    return M_expr.value(sol.values), X_expr.value(sol.values)


class TestConstructors:
    def test_parametric_dimensions(self):
        spec = parametric_iqc(-0.5, 0.5, a=0.0, nu=1, n_channels=1)
        assert spec.filter.n_states == 2
        assert spec.filter.n_out == 4
        assert spec.n_q == spec.n_p == 1

    def test_parametric_bounds_validation(self):
        with pytest.raises(ValueError):
            parametric_iqc(0.1, 0.5, a=0.0, nu=1)
        with pytest.raises(ValueError):
            parametric_iqc(-0.5, 0.5, a=1.5, nu=1)

    def test_dynamic_dimensions(self):
        spec = dynamic_iqc(0.1, a=0.5, nu=2)
        assert spec.filter.n_states == 4
        assert spec.filter.n_out == 6
        assert spec.n_q == spec.n_p == 1

    def test_stack(self):
        s1 = parametric_iqc(-0.1, 0.5, a=-0.25, nu=4)
        s2 = parametric_iqc(-0.3, 0.6, a=-0.25, nu=4)
        stacked = stack_iqcs([s1, s2])
        assert stacked.n_q == stacked.n_p == 2
        assert stacked.filter.n_states == s1.filter.n_states + s2.filter.n_states
        assert stack_iqcs([s1]) is s1

    def test_serialization_roundtrip(self):
        spec = stack_iqcs([parametric_iqc(-0.1, 0.5, a=-0.25, nu=4),
                           dynamic_iqc(0.1, a=0.5, nu=2)])
        data = spec.to_dict()
        spec2 = IqcSpec.from_dict(data)
        assert np.allclose(spec.filter.A_psi, spec2.filter.A_psi)
        assert np.allclose(spec.filter.D_psi_p, spec2.filter.D_psi_p)

    def test_basis_chain_realization(self):
        # outputs must match (1, 1/(z-a), ..., 1/(z-a)^nu) pointwise
        spec = parametric_iqc(-1.0, 1.0, a=0.3, nu=3)
        # q column of one copy with delta_hi = 1 gives psi itself
        psi = StateSpaceModel(spec.filter.A_psi[:3, :3], spec.filter.B_psi_q[:3],
                              spec.filter.C_psi[:4, :3], spec.filter.D_psi_q[:4])
        for th in (0.1, 0.7, 2.0):
            z = np.exp(1j * th)
            expect = np.array([[1.0], [1 / (z - 0.3)], [1 / (z - 0.3) ** 2],
                               [1 / (z - 0.3) ** 3]])
            got = freqresp(psi, [th])[0]
            assert np.max(np.abs(got - expect)) < 1e-12


class TestClassFeasibility:
    def test_parametric_class_admits_member(self):
        spec = parametric_iqc(-0.5, 0.5, a=0.0, nu=1)
        prob = SdpProblem()
        M_expr, X_expr = spec.multiplier_class.generate(prob, "p_")
        sol = solve_sdp(prob)
        assert sol.status == "optimal"
        M = M_expr.value(sol.values)
        # anti-diagonal block structure
        assert np.max(np.abs(M[:2, :2])) == 0.0
        assert np.max(np.abs(M[2:, 2:])) == 0.0
        rep = check_assumption1(spec, M)
        assert rep.passed

    def test_dynamic_class_admits_identity(self):
        # with gamma = 1, nu = 1, a = 0 the class inequality holds for
        # M_d = alpha I, X_d = alpha I for any alpha > 0
        spec = dynamic_iqc(1.0, a=0.0, nu=1)
        f = spec.filter
        Ab, Bb = f.A_psi[:1, :1], f.B_psi_q[:1]
        Cb = f.C_psi[:2, :1]
        Db = f.D_psi_q[:2]
        Md = np.eye(2)
        Xd = np.eye(1)
        top = np.hstack([np.eye(1), np.zeros((1, 1))])
        mid = np.hstack([Ab, Bb])
        bot = np.hstack([Cb, Db])
        lmi = -top.T @ Xd @ top + mid.T @ Xd @ mid + bot.T @ Md @ bot
        # identity sits in the closure of the class for every positive scale
        assert np.min(np.linalg.eigvalsh(lmi)) >= -1e-12
        prob = SdpProblem()
        spec.multiplier_class.generate(prob, "id_")
        assert solve_sdp(prob).status == "optimal"

    def test_dynamic_class_solver_member(self):
        spec = dynamic_iqc(0.1, a=0.5, nu=2)
        prob = SdpProblem()
        M_expr, _ = spec.multiplier_class.generate(prob, "d_")
        sol = solve_sdp(prob)
        assert sol.status == "optimal"
        rep = check_assumption1(spec, M_expr.value(sol.values))
        assert rep.passed


class TestAssumption1:
    def test_static_identity_pass(self):
        spec = identity_filter_spec()
        rep = check_assumption1(spec, np.diag([1.0, -1.0]))
        assert rep.passed
        assert rep.margin_pos == pytest.approx(1.0)
        assert rep.margin_neg == pytest.approx(-1.0)

    def test_static_identity_fail(self):
        spec = identity_filter_spec()
        rep = check_assumption1(spec, np.diag([-1.0, 1.0]))
        assert not rep.passed


class TestFactorize:
    def test_static_identity(self):
        spec = identity_filter_spec()
        fact = factorize(spec, np.diag([1.0, -1.0]))
        assert fact.n_states == 0
        assert fact.n0 == 0
        assert np.allclose(fact.D_hat, np.eye(2))
        assert np.allclose(fact.M_hat, np.diag([1.0, -1.0]))

    def test_static_scaled(self):
        spec = identity_filter_spec()
        fact = factorize(spec, np.diag([4.0, -1.0]))
        assert np.allclose(fact.D_hat, np.diag([2.0, 1.0]))

    def test_rejects_bad_multiplier(self):
        spec = identity_filter_spec()
        with pytest.raises(AssumptionViolatedError):
            factorize(spec, np.diag([-1.0, 1.0]))

    def _frequency_identity(self, spec, M, fact, tol):
        theta = np.linspace(0, np.pi, 128)
        orig = filtered_quadratic_response(spec, M, theta)
        hat_model = StateSpaceModel(fact.A_hat, fact.B_hat, fact.C_hat, fact.D_hat)
        hat = filtered_quadratic_response(hat_model, fact.M_hat, theta)
        dev = np.max(np.abs(orig - hat))
        assert dev < tol * (1.0 + np.linalg.norm(M)), dev

    def test_parametric_factorization(self):
        spec = parametric_iqc(-0.5, 0.5, a=0.0, nu=1)
        prob = SdpProblem()
        M_expr, X_expr = spec.multiplier_class.generate(prob, "p_")
        sol = solve_sdp(prob)
        M = M_expr.value(sol.values)
        fact = factorize(spec, M)
        self._frequency_identity(spec, M, fact, 1e-6)
        assert fact.certificate_residual() < 1e-8 * (1 + np.linalg.norm(fact.Z) + np.linalg.norm(M))
        # structure: A block-diagonal, lower-left zero blocks
        nq = fact.n_q
        assert np.max(np.abs(fact.C_hat[nq:, :fact.n1])) == 0.0
        assert np.max(np.abs(fact.D_hat[nq:, :nq])) == 0.0
        assert np.max(np.abs(fact.A_hat[:fact.n1, fact.n1:])) == 0.0
        assert np.max(np.abs(fact.A_hat[fact.n1:, :fact.n1])) == 0.0

    def test_dynamic_factorization(self):
        spec = dynamic_iqc(0.1, a=0.5, nu=2)
        prob = SdpProblem()
        M_expr, _ = spec.multiplier_class.generate(prob, "d_")
        sol = solve_sdp(prob)
        M = M_expr.value(sol.values)
        fact = factorize(spec, M)
        self._frequency_identity(spec, M, fact, 1e-6)
        A2, B2, _, _, C22, D22 = fact.blocks_12()
        inv_poles = np.abs(np.linalg.eigvals(A2 - B2 @ np.linalg.solve(D22, C22)))
        assert np.all(inv_poles < 1.0)

    def test_origin_pole_cancellation(self):
        # Psi1 = z/(z-a) vanishes at the origin, forcing one origin pole in
        # the unmixed factor that the z^-n0 shift must cancel
        from iqcsyn.iqc import MultiplierClass
        a = 0.4
        filt = IqcFilter([[a]], [[1.0]], [[0.0]], [[a], [0.0]],
                         [[1.0], [0.0]], [[0.0], [1.0]])
        spec = IqcSpec(filt, MultiplierClass("static", {}, None, None))
        M = np.diag([1.0, -1.0])
        fact = factorize(spec, M)
        assert fact.n0 == 1
        self._frequency_identity(spec, M, fact, 1e-8)
        assert fact.certificate_residual() < 1e-10

    def test_stacked_factorization(self):
        spec = stack_iqcs([parametric_iqc(-0.1, 0.5, a=-0.25, nu=2),
                           parametric_iqc(-0.3, 0.6, a=-0.25, nu=2)])
        prob = SdpProblem()
        M_expr, _ = spec.multiplier_class.generate(prob, "s_")
        sol = solve_sdp(prob)
        M = M_expr.value(sol.values)
        fact = factorize(spec, M)
        self._frequency_identity(spec, M, fact, 1e-6)


class TestTerminalCostTransform:
    def test_zero_cost_gives_certificate(self):
        spec = parametric_iqc(-0.5, 0.5, a=0.0, nu=1)
        prob = SdpProblem()
        M_expr, _ = spec.multiplier_class.generate(prob, "t_")
        sol = solve_sdp(prob)
        M = M_expr.value(sol.values)
        fact = factorize(spec, M)
        X_hat, V, _ = transform_terminal_cost(spec, fact, np.zeros((2, 2)))
        assert np.allclose(X_hat, fact.Z)

    def test_intertwining_identities(self):
        spec = stack_iqcs([parametric_iqc(-0.2, 0.4, a=0.1, nu=2),
                           dynamic_iqc(0.5, a=-0.3, nu=1)])
        prob = SdpProblem()
        M_expr, X_expr = spec.multiplier_class.generate(prob, "w_")
        sol = solve_sdp(prob)
        M = M_expr.value(sol.values)
        X = X_expr.value(sol.values)
        fact = factorize(spec, M)
        X_hat, V, fact2 = transform_terminal_cost(spec, fact, X)
        f = spec.filter
        Bpsi = np.hstack([f.B_psi_q, f.B_psi_p])
        scale = 1 + np.linalg.norm(fact.A_hat)
        assert np.linalg.norm(V @ fact.A_hat - f.A_psi @ V) < 1e-8 * scale
        assert np.linalg.norm(V @ fact.B_hat - Bpsi) < 1e-8 * scale
        assert np.linalg.norm(fact.C_psi_hat - f.C_psi @ V) < 1e-8 * scale
        assert np.linalg.matrix_rank(V) == f.n_states
        # split reconstructs X_hat up to the minimality cut of the split
        assert np.max(np.abs(fact2.L1.T @ fact2.L1 - fact2.L2.T @ fact2.L2 - X_hat)) < 1e-8 * (
            1 + np.max(np.abs(X_hat)))


class TestIqcResidual:
    def test_zero_signals(self):
        spec = parametric_iqc(-0.5, 0.5, a=0.0, nu=1)
        r = iqc_residual(spec, np.zeros((4, 4)), np.zeros((2, 2)),
                         Signal.zeros(10, 1), Signal.zeros(10, 1), 10)
        assert r == 0.0

    def test_static_substitution(self):
        spec = identity_filter_spec()
        rng = np.random.default_rng(0)
        q = rng.standard_normal(15)
        p = rng.standard_normal(15)
        r = iqc_residual(spec, np.diag([1.0, -1.0]), np.zeros((0, 0)),
                         Signal(q), Signal(p), 15)
        assert r == pytest.approx(float(np.sum(q * q - p * p)), rel=1e-12)

    @pytest.mark.parametrize("builder,make_delta", [
        (lambda: parametric_iqc(-0.5, 0.5, a=0.0, nu=2),
         lambda rng: float(rng.uniform(-0.5, 0.5))),
        (lambda: dynamic_iqc(0.8, a=0.25, nu=1),
         lambda rng: float(rng.uniform(-0.79, 0.79))),
    ])
    def test_empirical_validity_constant_delta(self, builder, make_delta):
        # feasible (M, X) must certify the horizon inequality for admissible
        # constant uncertainties on random inputs
        spec = builder()
        prob = SdpProblem()
        M_expr, X_expr = spec.multiplier_class.generate(prob, "e_")
        sol = solve_sdp(prob)
        assert sol.status == "optimal"
        M = M_expr.value(sol.values)
        X = X_expr.value(sol.values)
        rng = np.random.default_rng(42)
        for _ in range(50):
            d = make_delta(rng)
            T = int(rng.integers(5, 40))
            q = rng.standard_normal((T, 1))
            p = d * q
            energy = float(np.sum(q * q))
            r = iqc_residual(spec, M, X, Signal(q), Signal(p), T)
            assert r >= -1e-7 * max(energy, 1.0)

    def test_empirical_validity_dynamic_delta(self):
        spec = dynamic_iqc(0.5, a=0.0, nu=2)
        prob = SdpProblem()
        M_expr, X_expr = spec.multiplier_class.generate(prob, "ed_")
        sol = solve_sdp(prob)
        M = M_expr.value(sol.values)
        X = X_expr.value(sol.values)
        rng = np.random.default_rng(7)
        for _ in range(25):
            delta = spec.multiplier_class.sample(rng)
            assert lti_gain_oracle(delta, "hinf") < 0.5
            T = int(rng.integers(5, 40))
            q = rng.standard_normal((T, 1))
            # run delta on q
            x = np.zeros(delta.n_states)
            p = np.zeros((T, 1))
            for k in range(T):
                p[k] = delta.C @ x + delta.D @ q[k]
                x = delta.A @ x + delta.B @ q[k]
            r = iqc_residual(spec, M, X, Signal(q), Signal(p), T)
            assert r >= -1e-7 * max(float(np.sum(q * q)), 1.0)
