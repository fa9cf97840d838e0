"""IQC filters, multiplier classes, and the synthesis-enabling factorization.

Provides the parametric and scalar dynamic uncertainty descriptions,
their stacking, the frequency-domain admissibility check, the spectral
factorization of the filtered multiplier into a square filter with
``diag(I, -I)`` weight and stably invertible lower-right block, the
certificate tying the two descriptions together in the state space, and
the matching terminal-cost transformation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from .errors import (
    AssumptionViolatedError,
    CertificateResidualError,
    DimensionError,
    RankDeficiencyError,
)
from .matrixeq import (
    DareData,
    solve_dare,
    solve_generalized_stein,
    split_indefinite,
)
from .sdp import SdpProblem, block_expr, sym
from .statespace import StateSpaceModel, minreal

__all__ = [
    "IqcFilter",
    "MultiplierClass",
    "IqcSpec",
    "Factorization",
    "Assumption1Report",
    "parametric_iqc",
    "dynamic_iqc",
    "stack_iqcs",
    "check_assumption1",
    "factorize",
    "transform_terminal_cost",
    "iqc_residual",
]

EPS_LMI = 1e-7
EPS_FREQ = 1e-6


@dataclass(frozen=True)
class IqcFilter:
    """Stable filter driven by (q, p) whose output enters the quadratic form."""

    A_psi: np.ndarray
    B_psi_q: np.ndarray
    B_psi_p: np.ndarray
    C_psi: np.ndarray
    D_psi_q: np.ndarray
    D_psi_p: np.ndarray

    def __post_init__(self):
        for name in ("A_psi", "B_psi_q", "B_psi_p", "C_psi", "D_psi_q", "D_psi_p"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), float)))
        n = self.A_psi.shape[0]
        if self.A_psi.shape != (n, n):
            raise DimensionError("A_psi must be square")
        if n and np.max(np.abs(np.linalg.eigvals(self.A_psi))) >= 1.0 - 1e-8:
            raise AssumptionViolatedError("IQC filter must be Schur stable")

    @property
    def n_states(self) -> int:
        return self.A_psi.shape[0]

    @property
    def n_q(self) -> int:
        return self.B_psi_q.shape[1] if self.B_psi_q.size else self.D_psi_q.shape[1]

    @property
    def n_p(self) -> int:
        return self.B_psi_p.shape[1] if self.B_psi_p.size else self.D_psi_p.shape[1]

    @property
    def n_out(self) -> int:
        return self.C_psi.shape[0] if self.C_psi.size else self.D_psi_q.shape[0]

    def as_model(self) -> StateSpaceModel:
        return StateSpaceModel(self.A_psi, np.hstack([self.B_psi_q, self.B_psi_p]),
                               self.C_psi, np.hstack([self.D_psi_q, self.D_psi_p]))

    def q_columns(self) -> StateSpaceModel:
        return StateSpaceModel(self.A_psi, self.B_psi_q, self.C_psi, self.D_psi_q)

    def p_columns(self) -> StateSpaceModel:
        return StateSpaceModel(self.A_psi, self.B_psi_p, self.C_psi, self.D_psi_p)


@dataclass(frozen=True)
class MultiplierClass:
    """Constraint generator plus uncertainty sampler for one IQC family."""

    kind: str
    params: dict
    generator: object  # (SdpProblem, prefix) -> (M_expr, X_expr)
    sampler: object    # (rng) -> StateSpaceModel realization of an admissible Delta
    vertex_list: object = None  # () -> list of extreme admissible realizations

    def generate(self, problem: SdpProblem, prefix: str, extra_margin=None):
        return self.generator(problem, prefix, extra_margin)

    def sample(self, rng) -> StateSpaceModel:
        return self.sampler(rng)

    def vertices(self) -> list:
        return list(self.vertex_list()) if self.vertex_list is not None else []


@dataclass(frozen=True)
class IqcSpec:
    """Filter and multiplier class jointly describing one uncertainty set."""

    filter: IqcFilter
    multiplier_class: MultiplierClass

    @property
    def n_q(self) -> int:
        return self.filter.n_q

    @property
    def n_p(self) -> int:
        return self.filter.n_p

    def to_dict(self) -> dict:
        mc = self.multiplier_class
        if mc.kind == "stacked":
            return {"kind": "stacked",
                    "members": [m.to_dict() for m in mc.params["members"]]}
        return {"kind": mc.kind, **{k: v for k, v in mc.params.items()}}

    @classmethod
    def from_dict(cls, data: dict) -> "IqcSpec":
        kind = data["kind"]
        if kind == "parametric":
            return parametric_iqc(data["delta_lo"], data["delta_hi"], data["a"],
                                  data["nu"], data.get("n_channels", 1))
        if kind == "dynamic":
            return dynamic_iqc(data["gain_bound"], data["a"], data["nu"])
        if kind == "stacked":
            return stack_iqcs([cls.from_dict(m) for m in data["members"]])
        raise ValueError(f"unknown IQC kind {kind!r}")


# ---------------------------------------------------------------------------
# basis filter


def _basis_psi(a: float, nu: int, n_ch: int):
    """Minimal realization of the stacked basis (I, 1/(z-a), ..., 1/(z-a)^nu).

    The dynamic blocks carry the all-ones channel coupling, which is rank
    one, so a single scalar chain of ``nu`` states driven by the channel
    sum realizes every power; outputs replicate along the ones vector.
    """
    if not -1.0 < a < 1.0:
        raise ValueError(f"basis pole a must lie in (-1, 1), got {a}")
    if nu < 1:
        raise ValueError(f"basis order nu must be positive, got {nu}")
    ones = np.ones((n_ch, 1))
    A = a * np.eye(nu) + np.diag(np.ones(nu - 1), -1)
    B = np.zeros((nu, n_ch))
    B[0] = 1.0
    C = np.zeros(((nu + 1) * n_ch, nu))
    D = np.zeros(((nu + 1) * n_ch, n_ch))
    D[:n_ch] = np.eye(n_ch)
    for j in range(nu):
        C[(j + 1) * n_ch:(j + 2) * n_ch, j:j + 1] = ones
    return A, B, C, D


# ---------------------------------------------------------------------------
# parametric class


def parametric_iqc(delta_lo: float, delta_hi: float, a: float, nu: int,
                   n_channels: int = 1) -> IqcSpec:
    """IQC description of a repeated real parameter ``p = delta q``.

    ``delta`` is constant in ``[delta_lo, delta_hi]`` with
    ``delta_lo < 0 < delta_hi``.  The admissible multipliers have the
    anti-diagonal block structure coupled by an auxiliary storage R with
    ``R - X < 0``; the class inequality is driven through the q-columns
    of the filter only.
    """
    if not delta_lo < 0.0 < delta_hi:
        raise ValueError(f"interval must satisfy delta_lo < 0 < delta_hi, "
                         f"got [{delta_lo}, {delta_hi}]")
    Ab, Bb, Cb, Db = _basis_psi(a, nu, n_channels)
    npsi = Ab.shape[0]
    nch = n_channels
    mdim = Cb.shape[0]  # per-copy output dimension (nu+1)*n_ch
    A = sla.block_diag(Ab, Ab)
    Bq = np.vstack([delta_hi * Bb, -delta_lo * Bb])
    Bp = np.vstack([-Bb, Bb])
    C = sla.block_diag(Cb, Cb)
    Dq = np.vstack([delta_hi * Db, -delta_lo * Db])
    Dp = np.vstack([-Db, Db])
    filt = IqcFilter(A, Bq, Bp, C, Dq, Dp)

    def generate(problem: SdpProblem, prefix: str, extra_margin=None):
        M12 = problem.add_rectangular(f"{prefix}M12", mdim, mdim)
        X12 = problem.add_rectangular(f"{prefix}X12", npsi, npsi)
        R = problem.add_symmetric(f"{prefix}R", 2 * npsi)
        zm = np.zeros((mdim, mdim))
        zx = np.zeros((npsi, npsi))
        M_expr = block_expr([[zm, M12], [M12.T, zm]])
        X_expr = block_expr([[zx, X12], [X12.T, zx]])
        # filter driven through the q columns only
        stacked_top = np.hstack([np.eye(2 * npsi), np.zeros((2 * npsi, nch))])
        stacked_mid = np.hstack([A, Bq])
        stacked_bot_C = np.hstack([C, Dq])
        lmi = (- stacked_top.T @ R @ stacked_top
               + stacked_mid.T @ R @ stacked_mid
               + stacked_bot_C.T @ M_expr @ stacked_bot_C)
        rx = X_expr - R.expr()
        if extra_margin is not None:
            from .sdp import scalar_times
            lmi = lmi - scalar_times(extra_margin, np.eye(lmi.shape[0]))
            rx = rx - scalar_times(extra_margin, np.eye(2 * npsi))
        problem.add_psd(lmi, margin=EPS_LMI, name=f"{prefix}class")
        problem.add_psd(rx, margin=EPS_LMI, name=f"{prefix}RX")
        return M_expr, X_expr

    def sampler(rng) -> StateSpaceModel:
        d = float(rng.uniform(delta_lo, delta_hi))
        return StateSpaceModel.static(d * np.eye(nch))

    def vertices():
        return [StateSpaceModel.static(delta_lo * np.eye(nch)),
                StateSpaceModel.static(delta_hi * np.eye(nch))]

    mc = MultiplierClass("parametric",
                         {"delta_lo": delta_lo, "delta_hi": delta_hi, "a": a,
                          "nu": nu, "n_channels": n_channels},
                         generate, sampler, vertices)
    return IqcSpec(filt, mc)


# ---------------------------------------------------------------------------
# dynamic class


def dynamic_iqc(gain_bound: float, a: float, nu: int) -> IqcSpec:
    """IQC for a scalar stable dynamic uncertainty with gain below the bound."""
    if gain_bound <= 0:
        raise ValueError(f"gain bound must be positive, got {gain_bound}")
    Ab, Bb, Cb, Db = _basis_psi(a, nu, 1)
    npsi = Ab.shape[0]
    mdim = Cb.shape[0]
    A = sla.block_diag(Ab, Ab)
    Bq = np.vstack([Bb, np.zeros_like(Bb)])
    Bp = np.vstack([np.zeros_like(Bb), Bb])
    C = sla.block_diag(Cb, Cb)
    Dq = np.vstack([Db, np.zeros_like(Db)])
    Dp = np.vstack([np.zeros_like(Db), Db])
    filt = IqcFilter(A, Bq, Bp, C, Dq, Dp)
    g = float(gain_bound)

    def generate(problem: SdpProblem, prefix: str, extra_margin=None):
        Md = problem.add_symmetric(f"{prefix}Md", mdim)
        Xd = problem.add_symmetric(f"{prefix}Xd", npsi)
        zm = np.zeros((mdim, mdim))
        zx = np.zeros((npsi, npsi))
        M_expr = block_expr([[g * Md, zm], [zm, (-1.0 / g) * Md]])
        X_expr = block_expr([[g * Xd, zx], [zx, (-1.0 / g) * Xd]])
        top = np.hstack([np.eye(npsi), np.zeros((npsi, 1))])
        mid = np.hstack([Ab, Bb])
        bot = np.hstack([Cb, Db])
        lmi = (- top.T @ Xd @ top + mid.T @ Xd @ mid + bot.T @ Md @ bot)
        if extra_margin is not None:
            from .sdp import scalar_times
            lmi = lmi - scalar_times(extra_margin, np.eye(lmi.shape[0]))
        problem.add_psd(lmi, margin=EPS_LMI, name=f"{prefix}class")
        return M_expr, X_expr

    def sampler(rng) -> StateSpaceModel:
        from .statespace import lti_gain_oracle
        order = int(rng.integers(1, 4))
        for _ in range(50):
            Ad = rng.standard_normal((order, order))
            Ad *= rng.uniform(0.2, 0.85) / max(np.max(np.abs(np.linalg.eigvals(Ad))), 1e-9)
            Bd = rng.standard_normal((order, 1))
            Cd = rng.standard_normal((1, order))
            Dd = rng.standard_normal((1, 1)) * 0.3
            m = StateSpaceModel(Ad, Bd, Cd, Dd)
            norm = lti_gain_oracle(m, "hinf")
            if norm > 1e-9:
                scale = rng.uniform(0.3, 0.98) * g / norm
                return StateSpaceModel(Ad, Bd, scale * Cd, scale * Dd)
        return StateSpaceModel.static([[0.5 * g]])

    def vertices():
        return [StateSpaceModel.static([[s * 0.98 * g]]) for s in (-1.0, 1.0)]

    mc = MultiplierClass("dynamic", {"gain_bound": gain_bound, "a": a, "nu": nu},
                         generate, sampler, vertices)
    return IqcSpec(filt, mc)


# ---------------------------------------------------------------------------
# stacking


def stack_iqcs(specs: list) -> IqcSpec:
    """Diagonal stack of IQC descriptions; channel order follows the list."""
    specs = list(specs)
    if not specs:
        raise ValueError("cannot stack an empty list of IQC specs")
    if len(specs) == 1:
        return specs[0]
    filts = [s.filter for s in specs]
    A = sla.block_diag(*[f.A_psi for f in filts])
    Bq = sla.block_diag(*[f.B_psi_q for f in filts])
    Bp = sla.block_diag(*[f.B_psi_p for f in filts])
    C = sla.block_diag(*[f.C_psi for f in filts])
    Dq = sla.block_diag(*[f.D_psi_q for f in filts])
    Dp = sla.block_diag(*[f.D_psi_p for f in filts])
    filt = IqcFilter(A, Bq, Bp, C, Dq, Dp)

    def generate(problem: SdpProblem, prefix: str, extra_margin=None):
        Ms, Xs = [], []
        for i, s in enumerate(specs):
            Mi, Xi = s.multiplier_class.generate(problem, f"{prefix}b{i}_", extra_margin)
            Ms.append(Mi)
            Xs.append(Xi)
        ssz = [f.n_out for f in filts]
        xsz = [f.n_states for f in filts]
        M_expr = block_expr([[Ms[i] if i == j else np.zeros((ssz[i], ssz[j]))
                              for j in range(len(specs))] for i in range(len(specs))])
        X_expr = block_expr([[Xs[i] if i == j else np.zeros((xsz[i], xsz[j]))
                              for j in range(len(specs))] for i in range(len(specs))])
        return M_expr, X_expr

    def sampler(rng):
        parts = [s.multiplier_class.sample(rng) for s in specs]
        return _blockdiag_models(parts)

    def vertices():
        from itertools import product
        lists = [s.multiplier_class.vertices() for s in specs]
        if any(not lst for lst in lists):
            return []
        return [_blockdiag_models(list(combo)) for combo in product(*lists)]

    mc = MultiplierClass("stacked", {"members": specs}, generate, sampler, vertices)
    return IqcSpec(filt, mc)


def _blockdiag_models(models: list) -> StateSpaceModel:
    A = sla.block_diag(*[m.A for m in models])
    B = sla.block_diag(*[m.B for m in models])
    C = sla.block_diag(*[m.C for m in models])
    D = sla.block_diag(*[m.D for m in models])
    return StateSpaceModel(A, B, C, D)


# ---------------------------------------------------------------------------
# frequency-domain admissibility


@dataclass(frozen=True)
class Assumption1Report:
    passed: bool
    margin_pos: float   # min eigenvalue of Psi1* M Psi1 over the grid
    margin_neg: float   # max eigenvalue of the Schur complement block
    grid_size: int


def _resp(model: StateSpaceModel, z: complex) -> np.ndarray:
    n = model.n_states
    if n == 0:
        return model.D.astype(complex)
    return model.C @ np.linalg.solve(z * np.eye(n) - model.A, model.B) + model.D


def check_assumption1(spec: IqcSpec, M: np.ndarray, grid_size: int = 128,
                      eps: float = EPS_FREQ) -> Assumption1Report:
    """Grid check of the factorization preconditions on the unit circle.

    Evaluates ``Psi1* M Psi1 > 0`` and negativity of the complementary
    Schur block on ``grid_size`` points; the report carries the worst
    eigenvalue margins.
    """
    M = np.asarray(M, float)
    P1 = spec.filter.q_columns()
    P2 = spec.filter.p_columns()
    mpos = np.inf
    mneg = -np.inf
    for th in np.linspace(0.0, np.pi, grid_size):
        z = np.exp(1j * th)
        F1 = _resp(P1, z)
        F2 = _resp(P2, z)
        H11 = F1.conj().T @ M @ F1
        H11 = 0.5 * (H11 + H11.conj().T)
        lam = np.linalg.eigvalsh(H11)
        mpos = min(mpos, float(lam[0]))
        if lam[0] > 0:
            H22 = F2.conj().T @ M @ F2
            H12 = F1.conj().T @ M @ F2
            S = H22 - H12.conj().T @ np.linalg.solve(H11, H12)
            S = 0.5 * (S + S.conj().T)
            mneg = max(mneg, float(np.max(np.linalg.eigvalsh(S))))
        else:
            mneg = np.inf
    passed = bool(mpos > eps and mneg < -eps)
    return Assumption1Report(passed, mpos, mneg, grid_size)


# ---------------------------------------------------------------------------
# factorization


@dataclass(frozen=True)
class Factorization:
    """Square factor with diag(I, -I) weight, certificate, and projections."""

    A_hat: np.ndarray
    B_hat: np.ndarray
    C_hat: np.ndarray
    D_hat: np.ndarray
    M_hat: np.ndarray
    Z: np.ndarray
    C_psi_hat: np.ndarray
    D_psi: np.ndarray
    V_hat: np.ndarray
    n_q: int
    n_p: int
    n0: int
    n1: int  # states of the (1,1) factor block
    M: np.ndarray
    X_hat: np.ndarray = None
    L1: np.ndarray = None
    L2: np.ndarray = None

    @property
    def n_states(self) -> int:
        return self.A_hat.shape[0]

    @property
    def D22(self) -> np.ndarray:
        return self.D_hat[self.n_q:, self.n_q:]

    @property
    def C22(self) -> np.ndarray:
        return self.C_hat[self.n_q:, self.n1:]

    def blocks_12(self):
        """(A2, B2, C12, D12, C22, D22) of the second diagonal state block."""
        n1, nq = self.n1, self.n_q
        return (self.A_hat[n1:, n1:], self.B_hat[n1:, nq:],
                self.C_hat[:nq, n1:], self.D_hat[:nq, nq:],
                self.C_hat[nq:, n1:], self.D_hat[nq:, nq:])

    def as_filter(self) -> IqcFilter:
        """The factored filter viewed as an IQC filter on (q, p)."""
        nq = self.n_q
        return IqcFilter(self.A_hat, self.B_hat[:, :nq], self.B_hat[:, nq:],
                         self.C_hat, self.D_hat[:, :nq], self.D_hat[:, nq:])

    def certificate_residual(self) -> float:
        lhs_11 = self.A_hat.T @ self.Z @ self.A_hat - self.Z \
            + self.C_hat.T @ self.M_hat @ self.C_hat
        lhs_12 = self.A_hat.T @ self.Z @ self.B_hat + self.C_hat.T @ self.M_hat @ self.D_hat
        lhs_22 = self.B_hat.T @ self.Z @ self.B_hat + self.D_hat.T @ self.M_hat @ self.D_hat
        r11 = lhs_11 - self.C_psi_hat.T @ self.M @ self.C_psi_hat
        r12 = lhs_12 - self.C_psi_hat.T @ self.M @ self.D_psi
        r22 = lhs_22 - self.D_psi.T @ self.M @ self.D_psi
        return float(max(np.linalg.norm(r11), np.linalg.norm(r12), np.linalg.norm(r22)))


def _series(first: StateSpaceModel, gain: np.ndarray, second: StateSpaceModel) -> StateSpaceModel:
    """Cascade ``second o gain o first`` sharing no states."""
    n1, n2 = first.n_states, second.n_states
    A = np.block([[first.A, np.zeros((n1, n2))], [second.B @ gain @ first.C, second.A]])
    B = np.vstack([first.B, second.B @ gain @ first.D])
    C = np.hstack([second.D @ gain @ first.C, second.C])
    D = second.D @ gain @ first.D
    return StateSpaceModel(A, B, C, D)


def _conjugate_antistable(A, B, C, D) -> StateSpaceModel:
    """Stable realization of G*(z) = G(1/z)' for A with spectrum outside the disc."""
    n = A.shape[0]
    if n == 0:
        return StateSpaceModel.static(D.T)
    Ainv = np.linalg.inv(A)
    return StateSpaceModel(Ainv.T, Ainv.T @ C.T, -B.T @ Ainv.T, D.T - B.T @ Ainv.T @ C.T)


def _delay_outputs(model: StateSpaceModel, steps: int) -> StateSpaceModel:
    """Append ``steps`` unit delays to every output."""
    out = model
    for _ in range(steps):
        n, r = out.n_states, out.n_outputs
        A = np.block([[out.A, np.zeros((n, r))], [out.C, np.zeros((r, r))]])
        B = np.vstack([out.B, out.D])
        C = np.hstack([np.zeros((r, n)), np.eye(r)])
        out = StateSpaceModel(A, B, C, np.zeros((r, out.n_inputs)))
    return out


def _parallel(m1: StateSpaceModel, m2: StateSpaceModel) -> StateSpaceModel:
    A = sla.block_diag(m1.A, m2.A)
    B = np.vstack([m1.B, m2.B])
    C = np.hstack([m1.C, m2.C])
    return StateSpaceModel(A, B, C, m1.D + m2.D)


def _fir(taps: list, n_in: int) -> StateSpaceModel:
    """FIR system ``sum_m taps[m] z^-m`` (taps[0] is the direct term)."""
    r = taps[0].shape[0]
    depth = len(taps) - 1
    if depth == 0:
        return StateSpaceModel.static(taps[0])
    n = depth * n_in
    A = np.zeros((n, n))
    for k in range(1, depth):
        A[k * n_in:(k + 1) * n_in, (k - 1) * n_in:k * n_in] = np.eye(n_in)
    B = np.zeros((n, n_in))
    B[:n_in] = np.eye(n_in)
    C = np.hstack([taps[m] for m in range(1, depth + 1)])
    return StateSpaceModel(A, B, C, taps[0])


def factorize(spec: IqcSpec, M: np.ndarray, tol_cert: float = 1e-8,
              tol_freq: float = 1e-6, grid_size: int = 128) -> Factorization:
    """Factor ``Psi* M Psi`` as ``Psihat* diag(I,-I) Psihat`` with certificate.

    The construction runs the unmixed Riccati step on the q-columns,
    cancels the resulting poles at the origin with output delays,
    realizes the cross block through the conjugated antistable factor,
    runs the stabilizing Riccati step on the p-side stack, and obtains
    the certificate from the cross-coupled Stein equation of the paired
    realizations.

    The minimal-realization rank cut starts at 1e-9 and coarsens by two
    decades whenever the Riccati steps reject their data (near-cancelled
    modes smear to around 1e-6 on real multipliers); the frequency
    identity and certificate residual remain the authoritative gates.

    Raises
    ------
    AssumptionViolatedError
        The frequency-domain preconditions fail on the grid.
    SpectrumOnCircleError
        Propagated from the Riccati solves.
    CertificateResidualError
        The certificate identity fails tolerance after construction.
    """
    from .errors import IqcSynError

    last = None
    for mr_tol in (1e-9, 1e-7, 1e-5):
        try:
            return _factorize_at(spec, M, tol_cert, tol_freq, grid_size, mr_tol)
        except AssumptionViolatedError:
            raise
        except (IqcSynError, ValueError, np.linalg.LinAlgError) as exc:
            last = exc
    raise last


def _factorize_at(spec: IqcSpec, M: np.ndarray, tol_cert: float, tol_freq: float,
                  grid_size: int, mr_tol: float) -> Factorization:
    M = 0.5 * (np.asarray(M, float) + np.asarray(M, float).T)
    filt = spec.filter
    nq, npp = filt.n_q, filt.n_p
    report = check_assumption1(spec, M, grid_size=grid_size)
    if not report.passed:
        raise AssumptionViolatedError(
            f"frequency-domain conditions fail: positive margin {report.margin_pos:.2e}, "
            f"negative margin {report.margin_neg:.2e}")

    # step 1: unmixed Riccati on the q columns
    P1, _ = minreal(filt.q_columns(), tol=mr_tol)
    A1, B1, C1, Dq = P1.A, P1.B, P1.C, P1.D
    CD1 = np.hstack([C1, Dq])
    QSR1 = CD1.T @ M @ CD1
    n1m = A1.shape[0]
    sol_u = solve_dare(DareData(A1, B1, QSR1[:n1m, :n1m], QSR1[n1m:, n1m:],
                                QSR1[:n1m, n1m:]), "unmixed")
    inner1 = B1.T @ sol_u.Z @ B1 + QSR1[n1m:, n1m:]
    try:
        Dl11 = np.linalg.cholesky(0.5 * (inner1 + inner1.T)).T
    except np.linalg.LinAlgError as exc:
        raise AssumptionViolatedError(
            "B1' Zu B1 + R1 is not positive definite; the positivity condition fails") from exc
    Cl11 = np.linalg.solve(Dl11.T, (A1.T @ sol_u.Z @ B1 + QSR1[:n1m, n1m:]).T)
    n0 = sol_u.n_zero

    # stack [Psihat11; Psi1] and reduce
    if n0 == 0:
        stack1 = StateSpaceModel(A1, B1, np.vstack([Cl11, C1]), np.vstack([Dl11, Dq]))
    else:
        hat11 = _delay_outputs(StateSpaceModel(A1, B1, Cl11, Dl11), n0)
        # share the A1 states between the delayed row and Psi1
        nA = hat11.n_states
        C_shared = np.vstack([hat11.C, np.hstack([C1, np.zeros((C1.shape[0], nA - n1m))])])
        D_shared = np.vstack([hat11.D, Dq])
        stack1 = StateSpaceModel(hat11.A, hat11.B, C_shared, D_shared)
    stack1, _ = minreal(stack1, tol=mr_tol)
    Ah1, Bh1 = stack1.A, stack1.B
    Ch11, Ch1 = stack1.C[:nq], stack1.C[nq:]
    Dh11 = stack1.D[:nq]

    # step 2: cross block through the conjugated antistable factor
    P2, _ = minreal(filt.p_columns(), tol=mr_tol)
    Hstar = _conjugate_stable_factor(A1, B1, C1, Dq, Dl11, Cl11, n0, nq)
    cross = _series(P2, M, Hstar)
    stack2 = StateSpaceModel(cross.A, cross.B,
                             np.vstack([cross.C, np.hstack([P2.C, np.zeros((P2.C.shape[0],
                                                                            cross.n_states - P2.n_states))])]),
                             np.vstack([cross.D, P2.D]))
    stack2, _ = minreal(stack2, tol=mr_tol)
    Ah2, Bh2 = stack2.A, stack2.B
    Ch12, Ch2 = stack2.C[:nq], stack2.C[nq:]
    Dh12, Dp = stack2.D[:nq], stack2.D[nq:]

    # step 3: stabilizing Riccati on the p-side stack
    CD2 = np.block([[Ch12, Dh12], [Ch2, Dp]])
    W2 = sla.block_diag(np.eye(nq), -M)
    QSR2 = CD2.T @ W2 @ CD2
    n2m = Ah2.shape[0]
    sol_s = solve_dare(DareData(Ah2, Bh2, QSR2[:n2m, :n2m], QSR2[n2m:, n2m:],
                                QSR2[:n2m, n2m:]), "stabilizing")
    inner2 = Bh2.T @ sol_s.Z @ Bh2 + QSR2[n2m:, n2m:]
    try:
        Dh22 = np.linalg.cholesky(0.5 * (inner2 + inner2.T)).T
    except np.linalg.LinAlgError as exc:
        raise AssumptionViolatedError(
            "B2' Zs B2 + R2 is not positive definite; the negativity condition fails") from exc
    Ch22 = np.linalg.solve(Dh22.T, (Ah2.T @ sol_s.Z @ Bh2 + QSR2[:n2m, n2m:]).T)

    # assemble the factor
    n1h, n2h = Ah1.shape[0], Ah2.shape[0]
    A_hat = sla.block_diag(Ah1, Ah2)
    B_hat = sla.block_diag(Bh1, Bh2)
    C_hat = np.block([[Ch11, Ch12], [np.zeros((npp, n1h)), Ch22]])
    D_hat = np.block([[Dh11, Dh12], [np.zeros((npp, nq)), Dh22]])
    M_hat = np.diag(np.concatenate([np.ones(nq), -np.ones(npp)]))
    # Psi rebuilt on the hat states: [Psi1 Psi2] = (A_hat, B_hat, [Ch1 Ch2], D_psi)
    C_psi_hat = np.hstack([Ch1, Ch2])
    D_psi = np.hstack([filt.D_psi_q, filt.D_psi_p])

    # step 4: certificate from the paired realization
    Cbig = np.vstack([C_hat, C_psi_hat])
    Dbig = np.vstack([D_hat, D_psi])
    Mbig = sla.block_diag(-M_hat, M)
    Z = solve_generalized_stein(A_hat, B_hat, Cbig, Dbig, A_hat, B_hat, Cbig, Dbig,
                                Mbig, grid=grid_size, tol_fde=tol_freq,
                                tol_res=tol_cert)
    Z = 0.5 * (Z + Z.T)

    V_hat = _intertwiner(filt, A_hat, B_hat, C_psi_hat)
    A_hat, B_hat, C_hat, C_psi_hat, Z, V_hat = _balance_factorization(
        A_hat, B_hat, C_hat, C_psi_hat, Z, V_hat, n1h, nq)

    fact = Factorization(A_hat, B_hat, C_hat, D_hat, M_hat, Z, C_psi_hat, D_psi,
                         V_hat, nq, npp, n0, n1h, M)
    res = fact.certificate_residual()
    if res > tol_cert * (1.0 + np.linalg.norm(Z) + np.linalg.norm(M)):
        raise CertificateResidualError(f"certificate residual {res:.2e} exceeds tolerance")
    inv_poles = np.linalg.eigvals(Ah2 - Bh2 @ np.linalg.solve(Dh22, Ch22)) if n2h else np.zeros(0)
    if inv_poles.size and np.max(np.abs(inv_poles)) >= 1.0 - 1e-8:
        raise CertificateResidualError("inverse of the (2,2) factor block is not Schur stable")
    return fact


def _conjugate_stable_factor(A1, B1, C1, Dq, Dl11, Cl11, n0, nq) -> StateSpaceModel:
    """Stable realization of (Psi1 Psihat11^{-1})*.

    ``Psi1 Psihat11underbar^{-1}`` has its spectrum in {0} U outside the
    closed disc; the n0 origin poles of the underbar factor are split off
    by an ordered Schur form and become causal FIR taps of the conjugate,
    while the antistable part conjugates to a stable state-space block
    that is delayed n0 steps.
    """
    Dinv = np.linalg.inv(Dl11)
    At = A1 - B1 @ Dinv @ Cl11
    Bt = B1 @ Dinv
    Ct = C1 - Dq @ Dinv @ Cl11
    Dt = Dq @ Dinv
    n = At.shape[0]
    if n == 0:
        return StateSpaceModel.static(Dt.T)
    if n0 == 0:
        return _conjugate_antistable(At, Bt, Ct, Dt)
    T, Zs, sdim = sla.schur(At, output="real", sort="iuc")
    if sdim != n0:
        raise CertificateResidualError(
            f"origin-pole count mismatch: Riccati step found {n0}, Schur split {sdim}")
    T00, T0a, Taa = T[:n0, :n0], T[:n0, n0:], T[n0:, n0:]
    if Taa.size:
        Y = sla.solve_sylvester(T00, -Taa, -T0a)
    else:
        Y = np.zeros((n0, 0))
    V = Zs @ np.block([[np.eye(n0), Y], [np.zeros((n - n0, n0)), np.eye(n - n0)]])
    Bsplit = np.linalg.solve(V, Bt)
    Csplit = Ct @ V
    B0, Ba = Bsplit[:n0], Bsplit[n0:]
    C0, Ca = Csplit[:, :n0], Csplit[:, n0:]
    # FIR taps of z^-n0 W0*(z): coefficient of z^-m is (C0 T00^{n0-1-m} B0)'
    taps = [(C0 @ np.linalg.matrix_power(T00, n0 - 1 - m) @ B0).T for m in range(n0)]
    fir_part = _fir(taps, taps[0].shape[1])
    stable_conj = _conjugate_antistable(Taa, Ba, Ca, Dt) if Taa.size else \
        StateSpaceModel.static(Dt.T)
    delayed = _delay_outputs(stable_conj, n0)
    return _parallel(fir_part, delayed)


def _ctrb(A: np.ndarray, B: np.ndarray, depth: int) -> np.ndarray:
    cols = [B]
    for _ in range(depth - 1):
        cols.append(A @ cols[-1])
    return np.hstack(cols)


def _balance_block(A, B, C):
    """Internal balancing transform of one stable diagonal factor block."""
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), np.zeros((0, 0))
    from .matrixeq import solve_stein
    Wc = solve_stein(A.T, B @ B.T)
    Wo = solve_stein(A, C.T @ C)
    lc, Uc = np.linalg.eigh(0.5 * (Wc + Wc.T))
    lc = np.maximum(lc, 1e-14 * max(lc.max(), 1e-300))
    S = Uc * np.sqrt(lc)
    inner = S.T @ (0.5 * (Wo + Wo.T)) @ S
    lo, Uo = np.linalg.eigh(0.5 * (inner + inner.T))
    lo = np.maximum(lo[::-1], 1e-14 * max(lo.max(), 1e-300))
    Uo = Uo[:, ::-1]
    sig4 = lo ** 0.25
    T = S @ Uo / sig4
    return T, np.linalg.inv(T)


def _balance_factorization(A_hat, B_hat, C_hat, C_psi_hat, Z, V_hat, n1, nq):
    """Block-respecting internal balancing of the factored realization.

    Balancing each diagonal block against its own reachability and
    observability keeps the triangular sparsity while taming the
    conditioning of the certificate and of the intertwining projection.
    """
    n = A_hat.shape[0]
    C_full = np.vstack([C_hat, C_psi_hat])
    T1b, T1i = _balance_block(A_hat[:n1, :n1], B_hat[:n1], C_full[:, :n1])
    T2b, T2i = _balance_block(A_hat[n1:, n1:], B_hat[n1:], C_full[:, n1:])
    T = sla.block_diag(T1b, T2b)
    Ti = sla.block_diag(T1i, T2i)
    return (Ti @ A_hat @ T, Ti @ B_hat, C_hat @ T, C_psi_hat @ T,
            T.T @ Z @ T, V_hat @ T)


def _intertwiner(filt: IqcFilter, A_hat, B_hat, C_psi_hat, tol: float = 1e-8) -> np.ndarray:
    """Full-row-rank V with V A_hat = A_psi V, V B_hat = B_psi, C_psi_hat = C_psi V."""
    Apsi = filt.A_psi
    Bpsi = np.hstack([filt.B_psi_q, filt.B_psi_p])
    npsi, nhat = Apsi.shape[0], A_hat.shape[0]
    depth = max(nhat, npsi, 1)
    Cpsi_mat = _ctrb(Apsi, Bpsi, depth) if npsi else np.zeros((0, depth * Bpsi.shape[1]))
    Chat_mat = _ctrb(A_hat, B_hat, depth) if nhat else np.zeros((0, depth * B_hat.shape[1]))
    V = Cpsi_mat @ np.linalg.pinv(Chat_mat) if nhat else np.zeros((npsi, 0))
    scale = 1.0 + np.linalg.norm(Apsi) + np.linalg.norm(A_hat)
    checks = (
        np.linalg.norm(V @ A_hat - Apsi @ V),
        np.linalg.norm(V @ B_hat - Bpsi),
        np.linalg.norm(C_psi_hat - filt.C_psi @ V),
    )
    if max(checks) > tol * scale:
        raise RankDeficiencyError(
            f"no intertwining projection within tolerance (residuals {checks})")
    if npsi:
        s = np.linalg.svd(V, compute_uv=False)
        if s.size < npsi or s[-1] < 1e-9 * max(s[0], 1.0):
            raise RankDeficiencyError("intertwining projection is not full row rank")
    return V


def transform_terminal_cost(spec: IqcSpec, fact: Factorization, X: np.ndarray):
    """Terminal cost in the factored coordinates: ``Xhat = V' X V + Z``.

    Returns ``(X_hat, V_hat)`` and the factorization updated with the
    indefinite split of ``X_hat``.
    """
    X = np.asarray(X, float)
    if X.shape != (spec.filter.n_states, spec.filter.n_states):
        raise DimensionError(
            f"terminal cost must be {spec.filter.n_states} x {spec.filter.n_states}")
    V = fact.V_hat
    X_hat = V.T @ X @ V + fact.Z
    X_hat = 0.5 * (X_hat + X_hat.T)
    L1, L2 = split_indefinite(X_hat)
    updated = replace(fact, X_hat=X_hat, L1=L1, L2=L2)
    return X_hat, V, updated


def iqc_residual(filt_or_spec, M: np.ndarray, X: np.ndarray, q, p, t: int | None = None) -> float:
    """Left-hand side of the finite-horizon constraint at horizon ``t``.

    ``sum_{k<t} s_k' M s_k + xi_t' X xi_t`` with the filter started at
    zero.  Accepts an IqcSpec, IqcFilter, or Factorization-as-filter.
    """
    filt = filt_or_spec.filter if isinstance(filt_or_spec, IqcSpec) else filt_or_spec
    if isinstance(filt, Factorization):
        filt = filt.as_filter()
    qs = np.atleast_2d(np.asarray(getattr(q, "samples", q), float))
    ps = np.atleast_2d(np.asarray(getattr(p, "samples", p), float))
    if qs.shape[1] != filt.n_q or ps.shape[1] != filt.n_p:
        raise DimensionError("signal dimensions do not match the filter channels")
    T = qs.shape[0]
    if t is None:
        t = T
    if t > T:
        raise DimensionError(f"horizon {t} exceeds signal length {T}")
    M = np.asarray(M, float)
    X = np.asarray(X, float) if np.size(X) else np.zeros((filt.n_states, filt.n_states))
    xi = np.zeros(filt.n_states)
    acc = 0.0
    for k in range(t):
        s = filt.C_psi @ xi + filt.D_psi_q @ qs[k] + filt.D_psi_p @ ps[k]
        acc += float(s @ M @ s)
        xi = filt.A_psi @ xi + filt.B_psi_q @ qs[k] + filt.B_psi_p @ ps[k]
    if filt.n_states:
        acc += float(xi @ X @ xi)
    return acc
