import numpy as np
import pytest

from iqcsyn.sdp import (
    MatExpr,
    SdpProblem,
    block_expr,
    scalar_times,
    schur_embed,
    solve_sdp,
    sym,
    write_sdpa,
)

BACKENDS = ["clarabel", "scs"]


class TestExpressions:
    def test_affine_evaluation(self):
        prob = SdpProblem()
        X = prob.add_rectangular("X", 2, 3)
        L = np.arange(6.0).reshape(3, 2)
        R = np.arange(12.0).reshape(3, 4)
        e = L @ X @ R + np.ones((3, 4))
        Xv = np.arange(6.0).reshape(2, 3)
        assert np.allclose(e.value({"X": Xv}), L @ Xv @ R + 1.0)

    def test_transpose_roundtrip(self):
        prob = SdpProblem()
        X = prob.add_rectangular("X", 2, 3)
        e = (np.ones((4, 2)) @ X @ np.ones((3, 5))).T
        Xv = np.arange(6.0).reshape(2, 3)
        assert np.allclose(e.value({"X": Xv}), (np.ones((4, 2)) @ Xv @ np.ones((3, 5))).T)

    def test_jacobian_matches_value(self):
        rng = np.random.default_rng(0)
        prob = SdpProblem()
        X = prob.add_rectangular("X", 2, 3)
        P = prob.add_symmetric("P", 3)
        t = prob.add_scalar("t")
        L1, R1 = rng.standard_normal((4, 2)), rng.standard_normal((3, 4))
        L2, R2 = rng.standard_normal((4, 3)), rng.standard_normal((3, 4))
        e = L1 @ X @ R1 + L2 @ P @ R2 + (L2 @ X.T)[:, :2] @ rng.standard_normal((2, 4)) \
            + scalar_times(t, rng.standard_normal((4, 4))) + rng.standard_normal((4, 4))
        J, c0 = prob._param_jacobian(e)
        for _ in range(5):
            x = rng.standard_normal(prob._n_params)
            vals = prob.unpack(x)
            direct = e.value(vals).reshape(-1, order="F")
            assert np.allclose(J @ x + c0, direct, atol=1e-12)

    def test_blocks(self):
        prob = SdpProblem()
        P = prob.add_symmetric("P", 2)
        e = block_expr([[P, np.zeros((2, 1))], [np.zeros((1, 2)), np.eye(1)]])
        v = e.value({"P": np.eye(2) * 3.0})
        assert np.allclose(v, np.diag([3.0, 3.0, 1.0]))

    def test_sym(self):
        prob = SdpProblem()
        X = prob.add_rectangular("X", 2, 2)
        e = sym(np.array([[0.0, 2.0], [0.0, 0.0]]) @ X)
        Xv = np.array([[1.0, 0.0], [0.0, 1.0]])
        v = e.value({"X": Xv})
        assert np.allclose(v, v.T)


@pytest.mark.parametrize("solver", BACKENDS)
class TestSolve:
    def test_minimal_eigenvalue_problem(self, solver):
        # minimize t s.t. [[t, 1], [1, t]] >= 0 has optimum t = 1
        prob = SdpProblem()
        t = prob.add_scalar("t")
        prob.add_psd(block_expr([[t, np.ones((1, 1))], [np.ones((1, 1)), t]]))
        prob.set_objective(t)
        sol = solve_sdp(prob, solver=solver)
        assert sol.status == "optimal"
        assert sol.objective_value == pytest.approx(1.0, abs=1e-6)
        assert sol.max_constraint_violation < 1e-7

    def test_constant_infeasible(self, solver):
        prob = SdpProblem()
        prob.add_scalar("t")
        prob.add_psd(MatExpr((1, 1), [[-1.0]]))
        sol = solve_sdp(prob, solver=solver)
        assert sol.status == "infeasible"

    def test_scalar_lyapunov(self, solver):
        # find P with P >= eps and 0.25 P - P <= -1: P = 4/3 attains equality
        prob = SdpProblem()
        P = prob.add_symmetric("P", 1)
        prob.add_psd(P, margin=1e-6)
        prob.add_nsd(0.25 * P - P.expr() + np.eye(1))
        prob.set_objective(P.expr())
        sol = solve_sdp(prob, solver=solver)
        assert sol.status == "optimal"
        assert sol.values["P"][0, 0] == pytest.approx(4.0 / 3.0, rel=1e-5)

    def test_equality_and_nonneg(self, solver):
        # min x s.t. x + y = 3, y <= 1  -> x = 2
        prob = SdpProblem()
        x = prob.add_scalar("x")
        y = prob.add_scalar("y")
        prob.add_equality(x + y - 3.0)
        prob.add_nonneg(1.0 - y.expr())
        prob.set_objective(x)
        sol = solve_sdp(prob, solver=solver)
        assert sol.status == "optimal"
        assert sol.objective_value == pytest.approx(2.0, abs=1e-6)

    def test_round_trip_violation(self, solver):
        rng = np.random.default_rng(1)
        prob = SdpProblem()
        P = prob.add_symmetric("P", 3)
        A = rng.standard_normal((3, 3)) * 0.4
        prob.add_psd(P - np.eye(3) * 0.1)
        prob.add_nsd(A.T @ P @ A - P.expr() + np.eye(3))
        sol = solve_sdp(prob, solver=solver)
        assert sol.status == "optimal"
        assert sol.max_constraint_violation < 1e-7
        assert prob.constraint_violation(sol.values) == sol.max_constraint_violation

    def test_scaling_invariance_of_status(self, solver):
        for scale in (1.0, 100.0):
            prob = SdpProblem()
            P = prob.add_symmetric("P", 2)
            A = np.array([[0.5, 0.2], [0.0, 0.7]])
            prob.add_psd(scale * (P - 0.01 * np.eye(2)))
            prob.add_nsd(scale * (A.T @ P @ A - P.expr() + np.eye(2)))
            sol = solve_sdp(prob, solver=solver)
            assert sol.status == "optimal"


class TestSchurEmbed:
    def test_scalar_pattern(self):
        # -p + c^2/g < 0  <=>  [[-p, c], [c, -g]] < 0 for g > 0
        rng = np.random.default_rng(2)
        for _ in range(20):
            p, c, g = rng.uniform(0.1, 3.0, 3)
            direct = -p + c * c / g
            M = np.array([[-p, c], [c, -g]])
            lam = np.linalg.eigvalsh(M)
            assert (np.all(lam < 0)) == (direct < 0)

    def test_zero_cross_term_block_diagonal(self):
        e = schur_embed(np.eye(2) * -2.0, np.zeros((3, 2)), -1.0)
        v = e.value({})
        assert np.allclose(v, np.diag([-2.0, -2.0, -1.0, -1.0, -1.0]))

    def test_embedded_matches_direct_sign(self):
        rng = np.random.default_rng(3)
        prob = SdpProblem()
        X = prob.add_symmetric("X", 3)
        C = rng.standard_normal((2, 3))
        g = 1.7
        main = X - 5.0 * np.eye(3)
        emb = schur_embed(main, const_expr_like(C), -g)
        for _ in range(100):
            vals = prob.unpack(rng.standard_normal(prob._n_params))
            direct = vals["X"] - 5.0 * np.eye(3) + (1.0 / g) * C.T @ C
            lam_direct = np.max(np.linalg.eigvalsh(direct))
            lam_emb = np.max(np.linalg.eigvalsh(emb.value(vals)))
            assert (lam_emb < 0) == (lam_direct < 0)


def const_expr_like(M):
    from iqcsyn.sdp import const_expr
    return const_expr(M)


class TestSdpaDump:
    def test_writes_parseable_file(self, tmp_path):
        prob = SdpProblem()
        t = prob.add_scalar("t")
        prob.add_psd(block_expr([[t, np.ones((1, 1))], [np.ones((1, 1)), t]]))
        prob.add_nonneg(10.0 - t.expr())
        prob.set_objective(t)
        path = tmp_path / "prob.dat-s"
        write_sdpa(prob, path)
        lines = path.read_text().splitlines()
        assert lines[0].split()[0] == "1"  # one decision variable
        assert "nBLOCK" in lines[1]
