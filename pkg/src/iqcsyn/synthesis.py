"""One convex controller-synthesis step for a fixed multiplier.

Builds the generalized plant by inverting the stably invertible block of
the factored filter, transforms the controller and storage variables so
the closed loop is affine in them, states the synthesis inequalities
with the indefinite-cost relaxation anchored at the previous iterate,
and reconstructs the controller from a solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .errors import (
    BlockNotPositiveError,
    ConfigError,
    DimensionError,
    FeasibilitySeedFailedError,
    InfeasibleError,
    NotPositiveDefiniteError,
    SingularD22Error,
    SingularIXYError,
    SolverInaccurateError,
)
from .analysis import AnalysisOptions, PerformanceObjective
from .iqc import Factorization
from .matrixeq import solve_stein
from .sdp import MatExpr, SdpProblem, block_expr, scalar_times, solve_sdp
from .statespace import Controller, PartitionedPlant, StateSpaceModel

__all__ = [
    "GeneralizedPlant",
    "SynthesisVariables",
    "WarmStart",
    "nominal_factorization",
    "pad_factorization",
    "build_generalized_plant",
    "warm_start",
    "synthesize_step",
    "reconstruct_controller",
    "recover_analysis_certificate",
    "pad_controller",
    "extend_certificate",
]

EPS_LMI = 1e-7


def nominal_factorization() -> Factorization:
    """Empty factorization for synthesis without an uncertainty channel."""
    z0 = np.zeros((0, 0))
    return Factorization(z0, z0, z0, z0, z0, z0, z0, z0, z0, 0, 0, 0, 0, z0,
                         X_hat=z0, L1=z0, L2=z0)


def pad_factorization(fact: Factorization, extra: int) -> Factorization:
    """Append decoupled zero-pole states to the trailing factor block.

    The added modes are unobservable and uncontrollable, so every
    factorization identity extends by zero blocks; used to keep the
    synthesized controller order aligned with the previous iterate.
    """
    if extra <= 0:
        return fact
    n = fact.n_states
    A = sla.block_diag(fact.A_hat, np.zeros((extra, extra)))
    B = np.vstack([fact.B_hat, np.zeros((extra, fact.B_hat.shape[1]))])
    C = np.hstack([fact.C_hat, np.zeros((fact.C_hat.shape[0], extra))])
    Cpsi = np.hstack([fact.C_psi_hat, np.zeros((fact.C_psi_hat.shape[0], extra))])
    Z = sla.block_diag(fact.Z, np.zeros((extra, extra)))
    V = np.hstack([fact.V_hat, np.zeros((fact.V_hat.shape[0], extra))])
    X_hat = None if fact.X_hat is None else sla.block_diag(fact.X_hat, np.zeros((extra, extra)))
    L1 = None if fact.L1 is None else np.hstack([fact.L1, np.zeros((fact.L1.shape[0], extra))])
    L2 = None if fact.L2 is None else np.hstack([fact.L2, np.zeros((fact.L2.shape[0], extra))])
    return replace(fact, A_hat=A, B_hat=B, C_hat=C, C_psi_hat=Cpsi, Z=Z, V_hat=V,
                   X_hat=X_hat, L1=L1, L2=L2)


@dataclass(frozen=True)
class GeneralizedPlant:
    """Open loop with the factor channel exposed in place of p/q."""

    theta: PartitionedPlant  # groups: inputs (s2, w..., u), outputs (s1, z..., y)
    fact: Factorization
    rho: float
    n_x: int
    d22_condition: float

    @property
    def n_psi_hat(self) -> int:
        return self.fact.n_states

    @property
    def n_K(self) -> int:
        return self.n_psi_hat + self.n_x

    def w_names(self):
        return [n for n in self.theta.input_groups if n not in ("s2", "u")]

    def z_names(self):
        return [n for n in self.theta.output_groups if n not in ("s1", "y")]


def build_generalized_plant(G: PartitionedPlant, fact: Factorization,
                            rho: float = 1.0) -> GeneralizedPlant:
    """Invert the (2,2) factor block and expose the factor channel.

    The result maps (s2hat, w, u) to (s1hat, z, y) around the open loop,
    with the plant rows loop-transformed at rate rho and the factor rows
    untouched.

    Raises
    ------
    SingularD22Error
        The feedthrough of the invertible factor block is too ill
        conditioned (threshold 1e10).
    """
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must lie in (0, 1], got {rho}")
    nq, npp = fact.n_q, fact.n_p
    if nq != G.out_dim("q") or npp != G.in_dim("p"):
        raise DimensionError("factorization channel dims do not match the plant")
    D22 = fact.D22
    if npp:
        cond = float(np.linalg.cond(D22))
        if not np.isfinite(cond) or cond > 1e10:
            raise SingularD22Error(f"D22 condition number {cond:.2e} exceeds 1e10")
        Q22, R22 = np.linalg.qr(D22)
        D22inv = sla.solve_triangular(R22, Q22.T)
    else:
        cond = 1.0
        D22inv = np.zeros((0, 0))
    n1, nh = fact.n1, fact.n_states
    n2 = nh - n1
    nx = G.n_states
    A1h, B1h = fact.A_hat[:n1, :n1], fact.B_hat[:n1, :nq]
    A2h, B2h = fact.A_hat[n1:, n1:], fact.B_hat[n1:, nq:]
    C11, C12 = fact.C_hat[:nq, :n1], fact.C_hat[:nq, n1:]
    D11, D12 = fact.D_hat[:nq, :nq], fact.D_hat[:nq, nq:]
    C22 = fact.C_hat[nq:, n1:]
    ri = 1.0 / rho
    Ag, Cq, Cy = G.model.A, G.C("q"), G.C("y")
    Bp, Bu = G.B("p"), G.B("u")
    Dqp, Dqu = G.D("q", "p"), G.D("q", "u")
    Dyp = G.D("y", "p")
    K22 = D22inv @ C22  # appears in every inverted column
    S12 = D12 + D11 @ Dqp
    A = np.block([
        [A1h, -B1h @ Dqp @ K22, B1h @ Cq],
        [np.zeros((n2, n1)), A2h - B2h @ K22, np.zeros((n2, nx))],
        [np.zeros((nx, n1)), -ri * Bp @ K22, ri * Ag],
    ])
    blocks_B = {"s2": np.vstack([B1h @ Dqp @ D22inv, B2h @ D22inv, ri * Bp @ D22inv])}
    w_names = [n for n in G.input_groups if n not in ("p", "u")]
    z_names = [n for n in G.output_groups if n not in ("q", "y")]
    for wn in w_names:
        blocks_B[wn] = np.vstack([B1h @ G.D("q", wn), np.zeros((n2, G.in_dim(wn))),
                                  ri * G.B(wn)])
    blocks_B["u"] = np.vstack([B1h @ Dqu, np.zeros((n2, G.in_dim("u"))), ri * Bu])
    blocks_C = {"s1": np.hstack([C11, C12 - S12 @ K22, D11 @ Cq])}
    blocks_D = {("s1", "s2"): S12 @ D22inv, ("s1", "u"): D11 @ Dqu}
    for wn in w_names:
        blocks_D[("s1", wn)] = D11 @ G.D("q", wn)
    for zn in z_names:
        Dzp = G.D(zn, "p")
        blocks_C[zn] = np.hstack([np.zeros((G.out_dim(zn), n1)), -Dzp @ K22, G.C(zn)])
        blocks_D[(zn, "s2")] = Dzp @ D22inv
        blocks_D[(zn, "u")] = G.D(zn, "u")
        for wn in w_names:
            blocks_D[(zn, wn)] = G.D(zn, wn)
    blocks_C["y"] = np.hstack([np.zeros((G.out_dim("y"), n1)), -Dyp @ K22, Cy])
    blocks_D[("y", "s2")] = Dyp @ D22inv
    for wn in w_names:
        blocks_D[("y", wn)] = G.D("y", wn)
    theta = PartitionedPlant.from_blocks(A, blocks_B, blocks_C, blocks_D)
    return GeneralizedPlant(theta, fact, rho, nx, cond)


# ---------------------------------------------------------------------------
# transformed closed-loop blocks


def _closed_blocks(plant: GeneralizedPlant, Xv, Yv, Kv, Lv, Mv, Nv, w_names,
                   z_name: str):
    """Affine transformed closed-loop blocks for one (w..., z) channel pair.

    Works identically for decision-variable handles and plain arrays.
    """
    th = plant.theta
    w_names = list(w_names)
    A, Bu, Cy = th.model.A, th.B("u"), th.C("y")
    Bs2 = th.B("s2")
    Bw = np.hstack([th.B(n) for n in w_names]) if w_names else np.zeros((th.n_states, 0))
    Dys2 = th.D("y", "s2")
    Dyw = np.hstack([th.D("y", n) for n in w_names]) if w_names else \
        np.zeros((th.out_dim("y"), 0))
    out = {}
    out["A"] = block_expr([
        [A @ Yv + Bu @ Mv, A + Bu @ Nv @ Cy],
        [Kv, Xv @ A + Lv @ Cy],
    ])
    out["Bs2"] = block_expr([[Bs2 + Bu @ Nv @ Dys2], [Xv @ Bs2 + Lv @ Dys2]])
    out["Bw"] = block_expr([[Bw + Bu @ Nv @ Dyw], [Xv @ Bw + Lv @ Dyw]])
    for j, tag in ((z_name, "z"), ("s1", "s1")):
        Cj, Dju = th.C(j), th.D(j, "u")
        Djw = np.hstack([th.D(j, n) for n in w_names]) if w_names else \
            np.zeros((th.out_dim(j), 0))
        out[f"C{tag}"] = block_expr([[Cj @ Yv + Dju @ Mv, Cj + Dju @ Nv @ Cy]])
        out[f"D{tag}s2"] = MatExpr.wrap(th.D(j, "s2")) + Dju @ Nv @ Dys2
        out[f"D{tag}w"] = MatExpr.wrap(Djw) + Dju @ Nv @ Dyw
    return out


def _script_P(Xv, Yv, n_K: int):
    return block_expr([[Yv, np.eye(n_K)], [np.eye(n_K), Xv]])


# ---------------------------------------------------------------------------
# synthesis LMIs


def _lmi_pos(plant: GeneralizedPlant, P_script, E1, E1_old: np.ndarray):
    """Storage positivity (relaxed when the transformed cost is indefinite).

    ``E1_old`` is the numeric anchor block of the previous iterate.
    """
    L1, L2 = plant.fact.L1, plant.fact.L2
    X2 = L2.T @ L2
    core = MatExpr.wrap(P_script)
    if X2.size and np.any(X2):
        A = E1_old.T @ X2  # numeric anchor factor
        core = core - MatExpr.wrap(A @ E1_old) + A @ E1 + MatExpr.wrap(E1).T @ A.T
    if L1.shape[0] == 0:
        return core
    off = L1 @ MatExpr.wrap(E1)
    return block_expr([[core, off.T], [off, np.eye(L1.shape[0])]])


def _lmi_gain(P_script, blocks, gamma, kind: str, mu=None):
    """Bounded-real style inequality: the energy-gain or the stability form."""
    A, Bs2, Bw = blocks["A"], blocks["Bs2"], blocks["Bw"]
    Cs1, Ds1s2, Ds1w = blocks["Cs1"], blocks["Ds1s2"], blocks["Ds1w"]
    n2K = A.shape[0]
    n_p = Bs2.shape[1]
    n_w = Bw.shape[1]
    n_q = Cs1.shape[0]
    zP = np.zeros((n2K, n2K))
    P = MatExpr.wrap(P_script)
    if kind == "hinf":
        Cz, Dzs2, Dzw = blocks["Cz"], blocks["Dzs2"], blocks["Dzw"]
        n_z = Cz.shape[0]
        rows = [
            [-1.0 * P, np.zeros((n2K, n_p)), np.zeros((n2K, n_w)), A.T, Cs1.T, Cz.T],
            [np.zeros((n_p, n2K)), -np.eye(n_p), np.zeros((n_p, n_w)), Bs2.T, Ds1s2.T, Dzs2.T],
            [np.zeros((n_w, n2K)), np.zeros((n_w, n_p)), scalar_times(-1.0 * gamma, np.eye(n_w)),
             Bw.T, Ds1w.T, Dzw.T],
            [A, Bs2, Bw, -1.0 * P, np.zeros((n2K, n_q)), np.zeros((n2K, n_z))],
            [Cs1, Ds1s2, Ds1w, np.zeros((n_q, n2K)), -np.eye(n_q), np.zeros((n_q, n_z))],
            [Cz, Dzs2, Dzw, np.zeros((n_z, n2K)), np.zeros((n_z, n_q)),
             scalar_times(-1.0 * gamma, np.eye(n_z))],
        ]
    else:  # stability block used alongside the peak inequality
        rows = [
            [-1.0 * P, np.zeros((n2K, n_p)), np.zeros((n2K, n_w)), A.T, Cs1.T],
            [np.zeros((n_p, n2K)), -np.eye(n_p), np.zeros((n_p, n_w)), Bs2.T, Ds1s2.T],
            [np.zeros((n_w, n2K)), np.zeros((n_w, n_p)), scalar_times(-1.0 * mu, np.eye(n_w)),
             Bw.T, Ds1w.T],
            [A, Bs2, Bw, -1.0 * P, np.zeros((n2K, n_q))],
            [Cs1, Ds1s2, Ds1w, np.zeros((n_q, n2K)), -np.eye(n_q)],
        ]
    return block_expr(rows)


def _lmi_peak_syn(plant: GeneralizedPlant, P_script, blocks, E, E_old, gamma, mu,
                  kind: str, sigma: float, rho: float):
    """Peak-gain synthesis inequality with the anchored convex relaxation."""
    if not 0.0 < sigma < 1.0:
        raise ConfigError(f"sigma must lie strictly inside (0, 1), got {sigma} "
                          "(the reduced boundary inequalities are unsupported)")
    L1, L2 = plant.fact.L1, plant.fact.L2
    X2 = L2.T @ L2
    E1, E2, E3, E4 = E
    E1o, E2o, E3o, E4o = E_old
    A, Bs2, Bw = blocks["A"], blocks["Bs2"], blocks["Bw"]
    Cs1, Ds1s2, Ds1w = blocks["Cs1"], blocks["Ds1s2"], blocks["Ds1w"]
    Cz, Dzs2, Dzw = blocks["Cz"], blocks["Dzs2"], blocks["Dzw"]
    n2K = A.shape[0]
    n_p, n_w = Bs2.shape[1], Bw.shape[1]
    n_q, n_z = Cs1.shape[0], Cz.shape[0]
    nplus = L1.shape[0]
    P = MatExpr.wrap(P_script)
    if kind == "p2p":
        alpha = rho * rho / (1.0 - rho * rho)
        w_block = scalar_times(MatExpr.wrap(gamma) - MatExpr.wrap(mu),
                               -alpha * np.eye(n_w))
        z_block = scalar_times(gamma, (-1.0 / alpha) * np.eye(n_z))
    else:  # e2p
        alpha = 1.0
        w_block = scalar_times(gamma, -np.eye(n_w))
        z_block = scalar_times(gamma, -np.eye(n_z))
    L1E1 = L1 @ E1
    L1E2, L1E3, L1E4 = L1 @ E2, L1 @ E3, L1 @ E4
    base = block_expr([
        [-1.0 * P, np.zeros((n2K, n_p)), np.zeros((n2K, n_w)), L1E1.T, L1E2.T, Cs1.T, Cz.T],
        [np.zeros((n_p, n2K)), -sigma * np.eye(n_p), np.zeros((n_p, n_w)),
         np.zeros((n_p, nplus)), L1E3.T, Ds1s2.T, Dzs2.T],
        [np.zeros((n_w, n2K)), np.zeros((n_w, n_p)), w_block, np.zeros((n_w, nplus)),
         L1E4.T, Ds1w.T, Dzw.T],
        [L1E1, np.zeros((nplus, n_p)), np.zeros((nplus, n_w)),
         (-1.0 / (1.0 - sigma)) * np.eye(nplus), np.zeros((nplus, nplus)),
         np.zeros((nplus, n_q)), np.zeros((nplus, n_z))],
        [L1E2, L1E3, L1E4, np.zeros((nplus, nplus)), (-1.0 / sigma) * np.eye(nplus),
         np.zeros((nplus, n_q)), np.zeros((nplus, n_z))],
        [Cs1, Ds1s2, Ds1w, np.zeros((n_q, nplus)), np.zeros((n_q, nplus)),
         (-1.0 / sigma) * np.eye(n_q), np.zeros((n_q, n_z))],
        [Cz, Dzs2, Dzw, np.zeros((n_z, nplus)), np.zeros((n_z, nplus)),
         np.zeros((n_z, n_q)), z_block],
    ])
    if X2.size == 0 or not np.any(X2):
        return base
    width = n2K + n_p + n_w
    zp = np.zeros((plant.n_psi_hat, n_p))
    zw = np.zeros((plant.n_psi_hat, n_w))
    R1 = block_expr([[E1, zp, zw]])
    R2 = block_expr([[E2, E3, E4]])
    R1o = np.hstack([E1o, zp, zw])
    R2o = np.hstack([E2o, E3o, E4o])
    relax = ((1.0 - sigma) * (MatExpr.wrap(R1o.T @ X2 @ R1o)
                              - R1o.T @ X2 @ R1 - R1.T @ X2 @ R1o)
             + sigma * (MatExpr.wrap(R2o.T @ X2 @ R2o)
                        - R2o.T @ X2 @ R2 - R2.T @ X2 @ R2o))
    Epad = np.vstack([np.eye(width), np.zeros((base.shape[0] - width, width))])
    return base + Epad @ relax @ Epad.T


# ---------------------------------------------------------------------------
# warm start


@dataclass
class SynthesisVariables:
    """Numeric snapshot of the transformed decision variables."""

    X: np.ndarray
    Y: np.ndarray
    K: np.ndarray
    L: np.ndarray
    M: np.ndarray
    N: np.ndarray
    gamma: object  # float or per-channel dict
    mu: object


@dataclass
class WarmStart:
    """Feasible transformed snapshot of the previous controller and storage."""

    variables: SynthesisVariables
    P_hat: np.ndarray
    E_old: dict  # per channel name: (E1, E2, E3, E4)
    epsilon: float


def _transform_from(K_rho: Controller, P_hat: np.ndarray, plant: GeneralizedPlant):
    """Variable transformation of one controller/storage pair."""
    nK = plant.n_K
    X = P_hat[:nK, :nK]
    U = P_hat[:nK, nK:]
    Pinv = np.linalg.inv(P_hat)
    Y = Pinv[:nK, :nK]
    V = Pinv[:nK, nK:]
    th = plant.theta
    A, Bu, Cy = th.model.A, th.B("u"), th.C("y")
    border_l = np.block([[U, X @ Bu], [np.zeros((K_rho.n_outputs, nK)),
                                       np.eye(K_rho.n_outputs)]])
    border_r = np.block([[V.T, np.zeros((nK, K_rho.n_inputs))],
                         [Cy @ Y, np.eye(K_rho.n_inputs)]])
    mid = np.block([[K_rho.Ak, K_rho.Bk], [K_rho.Ck, K_rho.Dk]])
    KLMN = border_l @ mid @ border_r
    KLMN[:nK, :nK] += X @ A @ Y
    Kv = KLMN[:nK, :nK]
    Lv = KLMN[:nK, nK:]
    Mv = KLMN[nK:, :nK]
    Nv = KLMN[nK:, nK:]
    return X, Y, Kv, Lv, Mv, Nv


def _hat_from_analysis(P: np.ndarray, fact: Factorization, n_rest: int,
                       eps: float) -> np.ndarray:
    """Storage in factored coordinates, Eq.-style lift with slack eps."""
    V = fact.V_hat
    nh, npsi = V.shape[1], V.shape[0]
    Vp = sla.null_space(V) if nh else np.zeros((0, 0))
    n_extra = Vp.shape[1]
    Zbar = sla.block_diag(fact.Z, np.zeros((n_rest, n_rest)))
    T1inv = np.block([
        [Vp.T, np.zeros((n_extra, n_rest))],
        [V, np.zeros((npsi, n_rest))],
        [np.zeros((n_rest, nh)), np.eye(n_rest)],
    ])
    if n_extra:
        Au = Vp.T @ fact.A_hat @ Vp
        W = solve_stein(Au, np.eye(n_extra))
        core = sla.block_diag(eps * W, P)
    else:
        core = P
    return Zbar + T1inv.T @ core @ T1inv


def _seed_values(plant: GeneralizedPlant, K_old: Controller, P_hat: np.ndarray,
                 gamma_old, mu_old):
    K_rho = Controller(K_old.Ak / plant.rho, K_old.Bk / plant.rho, K_old.Ck, K_old.Dk)
    X, Y, Kv, Lv, Mv, Nv = _transform_from(K_rho, P_hat, plant)
    return SynthesisVariables(X, Y, Kv, Lv, Mv, Nv, gamma_old, mu_old)


def _numeric_blocks(plant: GeneralizedPlant, v: SynthesisVariables, w_names, z_name):
    blocks = _closed_blocks(plant, v.X, v.Y, v.K, v.L, v.M, v.N, w_names, z_name)
    return {k: MatExpr.wrap(e).value({}) for k, e in blocks.items()}


def _channel_names(plant: GeneralizedPlant, objectives):
    names = []
    for obj in objectives:
        wns = tuple(obj.w_channels) if obj.w_channels else tuple(plant.w_names())
        names.append((wns, obj.channel))
    return names


def _seed_violation(plant: GeneralizedPlant, seed: SynthesisVariables,
                    objectives, sigma: float) -> float:
    """Worst eigenvalue violation of the synthesis LMIs at a numeric seed."""
    nK = plant.n_K
    Psc = np.block([[seed.Y, np.eye(nK)], [np.eye(nK), seed.X]])
    worst = -np.inf
    names = _channel_names(plant, objectives)
    gammas = seed.gamma if isinstance(seed.gamma, (list, tuple)) else [seed.gamma]
    mus = seed.mu if isinstance(seed.mu, (list, tuple)) else [seed.mu]
    E1 = Psc[:plant.n_psi_hat]
    e_by_channel = {}
    for (wn, zn), obj in zip(names, objectives):
        blocks = _numeric_blocks(plant, seed, wn, zn)
        E = (E1, blocks["A"][:plant.n_psi_hat], blocks["Bs2"][:plant.n_psi_hat],
             blocks["Bw"][:plant.n_psi_hat])
        e_by_channel[(wn, zn)] = (blocks, E)
    pos = _lmi_pos(plant, Psc, E1, E1).value({})
    worst = max(worst, -np.min(np.linalg.eigvalsh(0.5 * (pos + pos.T))) if pos.size else 0.0)
    for (wn, zn), obj, g, m in zip(names, objectives, gammas, mus):
        blocks, E = e_by_channel[(wn, zn)]
        if obj.kind == "hinf":
            Mx = MatExpr.wrap(_lmi_gain(Psc, {k: MatExpr.wrap(v) for k, v in blocks.items()},
                                        float(g), "hinf")).value({})
            worst = max(worst, np.max(np.linalg.eigvalsh(0.5 * (Mx + Mx.T))))
        else:
            mu_val = float(g) if obj.kind == "e2p" else float(m)
            Ms = MatExpr.wrap(_lmi_gain(Psc, {k: MatExpr.wrap(v) for k, v in blocks.items()},
                                        float(g), "stab", mu=mu_val)).value({})
            worst = max(worst, np.max(np.linalg.eigvalsh(0.5 * (Ms + Ms.T))))
            Ewrap = tuple(MatExpr.wrap(e) for e in E)
            Mp = _lmi_peak_syn(plant, Psc, {k: MatExpr.wrap(v) for k, v in blocks.items()},
                               Ewrap, E, float(g), mu_val, obj.kind, sigma,
                               plant.rho).value({})
            worst = max(worst, np.max(np.linalg.eigvalsh(0.5 * (Mp + Mp.T))))
    return float(worst)


def nominal_warm_start(plant: GeneralizedPlant, objectives) -> WarmStart:
    """Trivial warm start for synthesis without an uncertainty channel.

    With no factor states the relaxation anchors are empty, so the step
    is an ordinary convex output-feedback synthesis.
    """
    if plant.n_psi_hat != 0:
        raise ConfigError("nominal warm start requires an empty factorization")
    names = _channel_names(plant, objectives)
    E_old = {}
    for wns, zn in names:
        nw = sum(plant.theta.in_dim(n) for n in wns)
        E_old[(wns, zn)] = (np.zeros((0, 2 * plant.n_K)), np.zeros((0, 2 * plant.n_K)),
                            np.zeros((0, plant.theta.in_dim("s2"))), np.zeros((0, nw)))
    z = np.zeros((0, 0))
    return WarmStart(SynthesisVariables(z, z, z, z, z, z, 0.0, 0.0), z, E_old, 0.0)


def warm_start(K_old: Controller, P_old: np.ndarray, plant: GeneralizedPlant,
               objectives, gamma_old, mu_old, sigma: float = 0.95,
               eps0: float = None, max_shrink: int = 20) -> WarmStart:
    """Feasible synthesis seed from the previous controller and certificate.

    Lifts the analysis storage into the factored coordinates with a slack
    on the unobservable modes, shrinking the slack geometrically until the
    seeded synthesis inequalities verify numerically.

    Raises
    ------
    NotPositiveDefiniteError
        The lifted storage fails positivity for every slack tried.
    FeasibilitySeedFailedError
        The slack search exhausts without a verifying seed.
    """
    if K_old.order != plant.n_K:
        raise DimensionError(
            f"warm start needs a controller of order {plant.n_K}, got {K_old.order}")
    n_rest = plant.n_x + plant.n_K
    if P_old.shape[0] != plant.fact.V_hat.shape[0] + n_rest:
        raise DimensionError("analysis certificate dimension mismatch")
    scale = max(float(np.trace(P_old)) / max(P_old.shape[0], 1), 1e-6)
    eps = eps0 if eps0 is not None else 1e-2 * scale
    best = None
    for _ in range(max_shrink + 1):
        P_hat = _hat_from_analysis(P_old, plant.fact, n_rest, eps)
        P_hat = 0.5 * (P_hat + P_hat.T)
        if np.min(np.linalg.eigvalsh(P_hat)) <= 0:
            eps *= 0.1
            continue
        seed = _seed_values(plant, K_old, P_hat, gamma_old, mu_old)
        viol = _seed_violation(plant, seed, objectives, sigma)
        if best is None or viol < best[0]:
            best = (viol, seed, P_hat, eps)
        if viol <= 1e-7 * scale:
            break
        eps *= 0.1
    if best is None:
        raise NotPositiveDefiniteError("lifted storage is never positive definite")
    viol, seed, P_hat, eps = best
    if viol > 1e-6 * max(scale, 1.0):
        raise FeasibilitySeedFailedError(
            f"seeded synthesis LMIs violate by {viol:.2e} after the slack search")
    names = _channel_names(plant, objectives)
    nh = plant.n_psi_hat
    Psc = np.block([[seed.Y, np.eye(plant.n_K)], [np.eye(plant.n_K), seed.X]])
    E_old = {}
    for wn, zn in names:
        blocks = _numeric_blocks(plant, seed, wn, zn)
        E_old[(wn, zn)] = (Psc[:nh], blocks["A"][:nh], blocks["Bs2"][:nh],
                           blocks["Bw"][:nh])
    return WarmStart(seed, P_hat, E_old, eps)


# ---------------------------------------------------------------------------
# the convex step


def _assemble_synthesis(plant: GeneralizedPlant, warm: WarmStart, objectives,
                        sigma: float, eps: float, recenter_caps=None,
                        norm_cap: float = None):
    """Synthesis SDP; with caps given, recenters instead of minimizing."""
    nK = plant.n_K
    problem = SdpProblem("synthesis")
    Xv = problem.add_symmetric("Xv", nK)
    Yv = problem.add_symmetric("Yv", nK)
    Kv = problem.add_rectangular("Kv", nK, nK)
    th = plant.theta
    ny = th.out_dim("y")
    nu = th.in_dim("u")
    Lv = problem.add_rectangular("Lv", nK, ny)
    Mv = problem.add_rectangular("Mv", nu, nK)
    Nv = problem.add_rectangular("Nv", nu, ny)
    gammas = [problem.add_scalar(f"gamma{j}") for j in range(len(objectives))]
    mus = [problem.add_scalar(f"mu{j}") for j in range(len(objectives))]
    Psc = _script_P(Xv, Yv, nK)
    names = _channel_names(plant, objectives)
    E1 = Psc[:plant.n_psi_hat, :]
    E1_old = warm.E_old[names[0]][0]
    pos = _lmi_pos(plant, Psc, E1, E1_old)
    obj_expr = None
    if recenter_caps is None:
        problem.add_psd(pos, margin=eps, name="pos")
    else:
        # maximize the smallest eigenvalue of the bounded positivity block,
        # which keeps the I - XY factorization away from singularity
        t = problem.add_scalar("t")
        d = pos.shape[0]
        problem.add_psd(pos - scalar_times(t, np.eye(d)), margin=0.0, name="pos")
        problem.add_nonneg(t.expr())
        if norm_cap is not None:
            problem.add_psd(norm_cap * np.eye(2 * nK) - MatExpr.wrap(Psc), name="Pcap")
        obj_expr = -1.0 * t.expr()
    for j, (obj, (wn, zn)) in enumerate(zip(objectives, names)):
        blocks = _closed_blocks(plant, Xv, Yv, Kv, Lv, Mv, Nv, wn, zn)
        g, m = gammas[j], mus[j]
        problem.add_nonneg(m.expr())
        problem.add_nonneg(g - m)
        if obj.kind == "hinf":
            problem.add_nsd(_lmi_gain(Psc, blocks, g, "hinf"), margin=eps,
                            name=f"hinf{j}")
        else:
            mu_like = g if obj.kind == "e2p" else m
            problem.add_nsd(_lmi_gain(Psc, blocks, g, "stab", mu=mu_like), margin=eps,
                            name=f"stab{j}")
            E = (E1, MatExpr.wrap(blocks["A"])[:plant.n_psi_hat, :],
                 MatExpr.wrap(blocks["Bs2"])[:plant.n_psi_hat, :],
                 MatExpr.wrap(blocks["Bw"])[:plant.n_psi_hat, :])
            problem.add_nsd(_lmi_peak_syn(plant, Psc, blocks, E, warm.E_old[(wn, zn)],
                                          g, mu_like, obj.kind, sigma, plant.rho),
                            margin=eps, name=f"peak{j}")
        if obj.role == "bound":
            problem.add_nonneg(float(obj.bound) - g.expr())
        if recenter_caps is not None:
            problem.add_nonneg(float(recenter_caps[j]) - g.expr())
        elif obj.role == "minimize":
            term = obj.weight * g.expr()
            obj_expr = term if obj_expr is None else obj_expr + term
    if obj_expr is None:
        obj_expr = gammas[0].expr() * 0.0
    problem.set_objective(obj_expr)
    return problem


def synthesize_step(plant: GeneralizedPlant, warm: WarmStart, objectives,
                    sigma: float = 0.95, opts: AnalysisOptions = None,
                    recenter: str = "auto"):
    """One controller-synthesis SDP for the fixed factored multiplier.

    Minimizes the weighted bounds over the transformed variables subject
    to the positivity block and the kind-selected gain inequalities, with
    the indefinite-cost relaxation anchored at the warm-start blocks.
    When the minimizer degenerates (``I - XY`` close to singular) a
    second solve freezes the achieved bounds, backs off by a fraction of
    this step's improvement, and maximizes the smallest eigenvalue of the
    bounded storage block so reconstruction stays well conditioned.

    Returns ``(controller, variables, gammas)`` where ``gammas`` is the
    per-objective list of achieved bounds.
    """
    opts = opts or AnalysisOptions()
    objectives = list(objectives)
    th = plant.theta
    eps = opts.eps_lmi * (1.0 + float(np.linalg.norm(th.model.A, 2)) ** 2)
    problem = _assemble_synthesis(plant, warm, objectives, sigma, eps)
    sol = solve_sdp(problem, solver=opts.solver, **opts.solver_opts)
    if sol.status == "infeasible":
        raise InfeasibleError("synthesis step infeasible despite a warm start; "
                              "numerical incident")
    if sol.status == "error":
        raise SolverInaccurateError("synthesis backend failed")
    g_list = [float(sol.values[f"gamma{j}"]) for j in range(len(objectives))]
    if recenter == "auto":
        nK = plant.n_K
        IXY = np.eye(nK) - sol.values["Xv"] @ sol.values["Yv"]
        s = np.linalg.svd(IXY, compute_uv=False) if nK else np.array([1.0])
        recenter = bool(s[-1] <= 1e-9 * max(s[0], 1.0)) or sol.status != "optimal"
    if recenter:
        # back off each bound by a fraction of this step's improvement so the
        # recentered iterate sits strictly inside the feasible set; the next
        # analysis then stays well conditioned and the chain stays monotone
        g_old = warm.variables.gamma
        g_old = list(g_old) if isinstance(g_old, (list, tuple)) else [g_old] * len(g_list)
        caps = []
        for g, go in zip(g_list, g_old):
            gap = max(float(go) - g, 0.0)
            back = min(0.25 * gap, 1e-3 * max(abs(g), 1.0))
            caps.append(g + max(back, 5e-6 * max(abs(g), 1.0)))
        Pw = np.block([[warm.variables.Y, np.eye(plant.n_K)],
                       [np.eye(plant.n_K), warm.variables.X]]) \
            if warm.variables.Y.size else np.eye(max(2 * plant.n_K, 1))
        norm_cap = 100.0 * max(float(np.max(np.linalg.eigvalsh(Pw))), 10.0)
        problem2 = _assemble_synthesis(plant, warm, objectives, sigma, eps,
                                       recenter_caps=caps, norm_cap=norm_cap)
        sol2 = solve_sdp(problem2, solver=opts.solver, **opts.solver_opts)
        usable = sol2.status == "optimal" or (
            sol2.status == "inaccurate" and sol2.max_constraint_violation < 1e-7)
        if usable and np.isfinite(sol2.objective_value):
            sol = sol2
            g_list = [max(float(sol.values[f"gamma{j}"]), c)
                      for j, c in enumerate(caps)]
    mu_list = [float(sol.values[f"mu{j}"]) if objectives[j].kind == "p2p" else g_list[j]
               for j in range(len(objectives))]
    variables = SynthesisVariables(sol.values["Xv"], sol.values["Yv"], sol.values["Kv"],
                                   sol.values["Lv"], sol.values["Mv"], sol.values["Nv"],
                                   g_list, mu_list)
    K = reconstruct_controller(variables, plant)[0]
    return K, variables, g_list


def _solve_ld(A, B):
    """Linear solve in extended precision (LU with partial pivoting).

    The reconstruction works against ``I - XY`` factors whose condition
    number approaches 1e9 near optimal faces; the extended mantissa keeps
    the forward error of the recovered controller far below the
    monotonicity tolerance of the iteration.
    """
    A = np.array(A, dtype=np.longdouble)
    B = np.array(B, dtype=np.longdouble)
    n = A.shape[0]
    if n == 0:
        return B
    perm = np.arange(n)
    for k in range(n - 1):
        piv = k + int(np.argmax(np.abs(A[k:, k])))
        if piv != k:
            A[[k, piv]] = A[[piv, k]]
            B[[k, piv]] = B[[piv, k]]
            perm[[k, piv]] = perm[[piv, k]]
        if A[k, k] == 0:
            raise SingularIXYError("singular border matrix in reconstruction")
        f = A[k + 1:, k] / A[k, k]
        A[k + 1:, k + 1:] -= np.outer(f, A[k, k + 1:])
        B[k + 1:] -= np.outer(f, B[k])
        A[k + 1:, k] = 0.0
    X = np.zeros_like(B)
    for i in range(n - 1, -1, -1):
        X[i] = (B[i] - A[i, i + 1:] @ X[i + 1:]) / A[i, i]
    return X


def reconstruct_controller(variables: SynthesisVariables, plant: GeneralizedPlant):
    """Controller and factored storage from transformed variables.

    Uses the convention ``U = I - XY``, ``V = I`` and undoes the variable
    transformation in extended precision before removing the
    loop-transform scaling from the state and input maps.

    Raises
    ------
    SingularIXYError
        ``I - XY`` is numerically singular.
    """
    nK = plant.n_K
    X = np.array(variables.X, dtype=np.longdouble)
    Y = np.array(variables.Y, dtype=np.longdouble)
    IXY = np.eye(nK, dtype=np.longdouble) - X @ Y
    if nK:
        s = np.linalg.svd(IXY.astype(float), compute_uv=False)
        if s[-1] <= 1e-13 * max(s[0], 1.0):
            raise SingularIXYError("I - XY is singular; positivity margin lost")
    U, V = IXY, np.eye(nK, dtype=np.longdouble)
    th = plant.theta
    A = np.array(th.model.A, dtype=np.longdouble)
    Bu = np.array(th.B("u"), dtype=np.longdouble)
    Cy = np.array(th.C("y"), dtype=np.longdouble)
    nu, ny = th.in_dim("u"), th.out_dim("y")
    border_l = np.block([[U, X @ Bu],
                         [np.zeros((nu, nK), dtype=np.longdouble),
                          np.eye(nu, dtype=np.longdouble)]])
    border_r = np.block([[V.T, np.zeros((nK, ny), dtype=np.longdouble)],
                         [Cy @ Y, np.eye(ny, dtype=np.longdouble)]])
    mid = np.block([[np.asarray(variables.K, dtype=np.longdouble) - X @ A @ Y,
                     np.asarray(variables.L, dtype=np.longdouble)],
                    [np.asarray(variables.M, dtype=np.longdouble),
                     np.asarray(variables.N, dtype=np.longdouble)]])
    half = _solve_ld(border_l, mid)
    KLMN = _solve_ld(border_r.T, half.T).T
    Ak_rho, Bk_rho = KLMN[:nK, :nK], KLMN[:nK, nK:]
    Ck, Dk = KLMN[nK:, :nK], KLMN[nK:, nK:]
    K = Controller(np.asarray(plant.rho * Ak_rho, float),
                   np.asarray(plant.rho * Bk_rho, float),
                   np.asarray(Ck, float), np.asarray(Dk, float))
    top = np.block([[Y, V], [np.eye(nK, dtype=np.longdouble),
                             np.zeros((nK, nK), dtype=np.longdouble)]])
    bottom = np.block([[np.eye(nK, dtype=np.longdouble),
                        np.zeros((nK, nK), dtype=np.longdouble)], [X, U]])
    P_hat = np.asarray(_solve_ld(top, bottom), float)
    P_hat = 0.5 * (P_hat + P_hat.T)
    if nK and np.min(np.linalg.eigvalsh(P_hat)) <= 0:
        raise NotPositiveDefiniteError("reconstructed storage is not positive definite")
    return K, P_hat


def recover_analysis_certificate(P_hat: np.ndarray, fact: Factorization,
                                 n_rest: int) -> np.ndarray:
    """Storage for the original filter coordinates from the factored one.

    Displays the unobservable modes, checks their block positivity, and
    removes them by a Schur complement.

    Raises
    ------
    BlockNotPositiveError
        The unobservable-mode block is not positive definite.
    """
    V = fact.V_hat
    nh, npsi = V.shape[1], V.shape[0]
    Vp = sla.null_space(V) if nh else np.zeros((0, 0))
    n_extra = Vp.shape[1]
    Vdag = V.T @ np.linalg.inv(V @ V.T) if npsi else np.zeros((nh, 0))
    T1 = np.block([
        [Vp, Vdag, np.zeros((nh, n_rest))],
        [np.zeros((n_rest, n_extra)), np.zeros((n_rest, npsi)), np.eye(n_rest)],
    ])
    Zbar = sla.block_diag(fact.Z, np.zeros((n_rest, n_rest)))
    Pbar = T1.T @ (P_hat - Zbar) @ T1
    if n_extra == 0:
        return 0.5 * (Pbar + Pbar.T)
    P11 = Pbar[:n_extra, :n_extra]
    lam = np.linalg.eigvalsh(0.5 * (P11 + P11.T))
    if lam[0] <= 0:
        raise BlockNotPositiveError(
            f"unobservable-mode block has eigenvalue {lam[0]:.2e} <= 0")
    P12 = Pbar[:n_extra, n_extra:]
    P22 = Pbar[n_extra:, n_extra:]
    P = P22 - P12.T @ np.linalg.solve(P11, P12)
    return 0.5 * (P + P.T)


def pad_controller(K: Controller, target_order: int) -> Controller:
    """Append decoupled zero-pole states; frequency response unchanged."""
    extra = target_order - K.order
    if extra < 0:
        raise ConfigError(f"cannot reduce controller order {K.order} to {target_order}")
    if extra == 0:
        return K
    Ak = sla.block_diag(K.Ak, np.zeros((extra, extra)))
    Bk = np.vstack([K.Bk, np.zeros((extra, K.n_inputs))])
    Ck = np.hstack([K.Ck, np.zeros((K.n_outputs, extra))])
    return Controller(Ak, Bk, Ck, K.Dk)


def extend_certificate(P: np.ndarray, extra: int, scale: float = None) -> np.ndarray:
    """Extend an analysis storage over appended decoupled controller states."""
    if extra <= 0:
        return P
    if scale is None:
        scale = max(float(np.trace(P)) / max(P.shape[0], 1), 1.0)
    return sla.block_diag(P, scale * np.eye(extra))
