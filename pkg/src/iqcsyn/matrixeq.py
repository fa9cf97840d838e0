"""Structured matrix-equation kernels.

Discrete-time algebraic Riccati equations with eigenvalue-region
selection via an ordered QZ decomposition of the associated pencil,
Stein and cross-coupled (generalized) Stein equations, and the minimal
indefinite symmetric split used by the synthesis relaxation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import (
    CertificateResidualError,
    FrequencyIdentityViolatedError,
    InstabilityError,
    SingularInnerTermError,
    SpectrumOnCircleError,
    SubspaceNotDisconjugateError,
)
from .statespace import _reachable_basis

__all__ = [
    "DareData",
    "DareSolution",
    "solve_dare",
    "solve_stein",
    "solve_generalized_stein",
    "split_indefinite",
]

TOL_SPEC = 1e-8
ZERO_EIG_TOL = 1e-6


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def is_controllable(A: np.ndarray, B: np.ndarray, rtol: float = 1e-9) -> bool:
    n = A.shape[0]
    return _reachable_basis(A, B, rtol).shape[1] == n


@dataclass(frozen=True)
class DareData:
    """Data ``(A, B, Q, R, S)`` of the Riccati equation

    ``A' Z A - Z + Q - (A' Z B + S)(B' Z B + R)^-1 (A' Z B + S)' = 0``.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        B = np.atleast_2d(np.asarray(self.B, float))
        if A.shape[0] and B.size:
            B = B.reshape(A.shape[0], -1)
        elif B.shape[0] != A.shape[0]:
            B = B.reshape(A.shape[0], -1) if B.size else np.zeros((A.shape[0], B.shape[1]))
        n, m = B.shape
        Q = np.asarray(self.Q, float).reshape(n, n)
        R = np.asarray(self.R, float).reshape(m, m)
        S = np.asarray(self.S, float).reshape(n, m)
        for name, M in (("Q", Q), ("R", R)):
            if M.size and np.max(np.abs(M - M.T)) > 1e-10 * (1 + np.max(np.abs(M))):
                raise ValueError(f"{name} must be symmetric")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Q", _symmetrize(Q))
        object.__setattr__(self, "R", _symmetrize(R))
        object.__setattr__(self, "S", S)


@dataclass(frozen=True)
class DareSolution:
    """Riccati solution with its gain, closed-loop spectrum, and diagnostics."""

    Z: np.ndarray
    K_gain: np.ndarray
    closed_spectrum: np.ndarray
    mode: str
    inner_condition: float
    n_zero: int

    def residual(self, data: DareData) -> float:
        A, B, Q, R, S = data.A, data.B, data.Q, data.R, data.S
        Z = self.Z
        G = A.T @ Z @ B + S
        inner = B.T @ Z @ B + R
        res = A.T @ Z @ A - Z + Q - G @ np.linalg.solve(inner, G.T)
        return float(np.linalg.norm(res))


def _dare_pencil(data: DareData):
    A, B, Q, R, S = data.A, data.B, data.Q, data.R, data.S
    n, m = B.shape
    E = np.block([
        [np.eye(n), np.zeros((n, n)), np.zeros((n, m))],
        [np.zeros((n, n)), -A.T, np.zeros((n, m))],
        [np.zeros((m, n)), -B.T, np.zeros((m, m))],
    ])
    Ap = np.block([[A, np.zeros((n, n)), B], [Q, -np.eye(n), S], [S.T, np.zeros((m, n)), R]])
    return Ap, E


def _classify(alpha: np.ndarray, beta: np.ndarray, mode: str) -> np.ndarray:
    """Region membership mask for generalized eigenvalues alpha/beta."""
    a, b = np.abs(alpha), np.abs(beta)
    scale = a + b
    infinite = b <= 1e-12 * np.maximum(scale, 1e-300)
    zero = a <= ZERO_EIG_TOL * np.maximum(scale, 1e-300)
    if mode == "stabilizing":
        return ~infinite & (a < b)
    return zero | (~infinite & (a > b))


def _dare_residual_matrix(data: DareData, Z: np.ndarray) -> np.ndarray:
    G = data.A.T @ Z @ data.B + data.S
    inner = data.B.T @ Z @ data.B + data.R
    return data.A.T @ Z @ data.A - Z + data.Q - G @ np.linalg.solve(inner, G.T)


def _newton_refine(data: DareData, Z: np.ndarray) -> np.ndarray:
    """One Newton step on the DARE residual.

    The Frechet derivative at Z acts as ``X -> Acl' X Acl - X`` with the
    closed loop Acl = A + B K(Z); the correction therefore solves a Stein
    equation, done here by a dense Kronecker solve so both eigenvalue
    regions are covered.
    """
    A, B = data.A, data.B
    n = A.shape[0]
    inner = B.T @ Z @ B + data.R
    K = -np.linalg.solve(inner, (A.T @ Z @ B + data.S).T)
    Acl = A + B @ K
    res = _dare_residual_matrix(data, Z)
    lhs = np.kron(Acl.T, Acl.T) - np.eye(n * n)
    try:
        dZ = np.linalg.solve(lhs, -res.reshape(-1, order="F")).reshape((n, n), order="F")
    except np.linalg.LinAlgError:
        return Z
    return _symmetrize(Z + dZ)


def solve_dare(data: DareData, mode: str = "stabilizing") -> DareSolution:
    """Solve the DARE selecting a prescribed closed-loop eigenvalue region.

    Parameters
    ----------
    data : DareData
    mode : {"stabilizing", "unmixed"}
        ``stabilizing`` places the closed-loop spectrum inside the open
        unit disc; ``unmixed`` inside ``{0} U {|lambda| > 1}``.

    Returns
    -------
    DareSolution

    Raises
    ------
    SpectrumOnCircleError
        A generalized eigenvalue of the pencil lies on the unit circle
        within tolerance, so neither region selection is valid.
    SubspaceNotDisconjugateError
        The selected deflating subspace does not produce a symmetric
        solution (wrong eigenvalue count or singular leading block).
    SingularInnerTermError
        ``B' Z B + R`` is numerically singular.
    """
    if mode not in ("stabilizing", "unmixed"):
        raise ValueError(f"mode must be 'stabilizing' or 'unmixed', got {mode!r}")
    A, B = data.A, data.B
    n, m = B.shape
    if n == 0:
        inner = data.R
        cond = float(np.linalg.cond(inner)) if m else 1.0
        if m and (not np.isfinite(cond) or cond > 1e12):
            raise SingularInnerTermError("R is singular in the degenerate 0-state DARE")
        return DareSolution(np.zeros((0, 0)), np.zeros((m, 0)), np.zeros(0, complex),
                            mode, cond, 0)
    if not is_controllable(A, B):
        raise ValueError("(A, B) must be controllable for a region-selected DARE solution")
    Ap, E = _dare_pencil(data)
    evals = sla.eigvals(Ap, E)
    finite = np.isfinite(evals)
    mods = np.abs(evals[finite])
    if np.any(np.abs(mods - 1.0) <= TOL_SPEC * np.maximum(mods, 1.0)):
        raise SpectrumOnCircleError(
            "the Riccati pencil has a generalized eigenvalue on the unit circle")

    def select(alpha, beta):
        return _classify(np.atleast_1d(alpha), np.atleast_1d(beta), mode)

    AA, BB, alpha, beta, _, Zq = sla.ordqz(Ap, E, sort=select, output="real")
    k = int(np.sum(_classify(alpha, beta, mode)))
    if k != n:
        raise SubspaceNotDisconjugateError(
            f"{mode} region selects {k} of {Ap.shape[0]} pencil eigenvalues, expected {n}")
    X = Zq[:, :n]
    X1, X2 = X[:n], X[n:2 * n]
    s = np.linalg.svd(X1, compute_uv=False)
    if s[-1] <= 1e-12 * max(s[0], 1.0):
        raise SubspaceNotDisconjugateError("deflating subspace has singular leading block")
    Z = X2 @ np.linalg.inv(X1)
    asym = np.max(np.abs(Z - Z.T))
    if asym > 1e-6 * (1.0 + np.max(np.abs(Z))):
        raise SubspaceNotDisconjugateError(
            f"deflating subspace yields asymmetric solution (asymmetry {asym:.2e})")
    Z = _symmetrize(Z)
    refined = _newton_refine(data, Z)
    if np.linalg.norm(_dare_residual_matrix(data, refined)) < np.linalg.norm(
            _dare_residual_matrix(data, Z)):
        Z = refined
    inner = B.T @ Z @ B + data.R
    # cancellation scale, not cond(inner): B'ZB and R may nearly cancel
    inner_scale = float(np.linalg.norm(B.T @ Z @ B) + np.linalg.norm(data.R)) + 1e-300
    smin = float(np.linalg.svd(inner, compute_uv=False)[-1]) if m else 1.0
    cond = inner_scale / max(smin, 1e-300) if m else 1.0
    if m and cond > 1e12:
        raise SingularInnerTermError(
            f"B'ZB + R is singular at the problem scale (effective condition {cond:.2e})")
    K = -np.linalg.solve(inner, (A.T @ Z @ B + data.S).T)
    res = np.linalg.norm(_dare_residual_matrix(data, Z))
    if res > 1e-8 * (1.0 + np.linalg.norm(Z)):
        raise SubspaceNotDisconjugateError(
            f"DARE residual {res:.2e} exceeds tolerance for |Z| = "
            f"{np.linalg.norm(Z):.2e}; the instance is too ill-conditioned")
    spec = np.linalg.eigvals(A + B @ K)
    mods = np.abs(spec)
    if mode == "stabilizing":
        ok = np.all(mods < 1.0 - TOL_SPEC)
        n_zero = 0
    else:
        zero = mods <= ZERO_EIG_TOL
        ok = np.all(zero | (mods > 1.0 + TOL_SPEC))
        n_zero = int(np.sum(zero))
    if not ok:
        raise SubspaceNotDisconjugateError(
            f"closed-loop spectrum escapes the {mode} region: moduli {np.sort(mods)}")
    return DareSolution(Z, K, spec, mode, cond, n_zero)


def solve_stein(A: np.ndarray, Q: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Unique solution of ``A' Z A - Z + Q = 0`` for Schur-stable A.

    Raises
    ------
    InstabilityError
        If A has an eigenvalue with modulus >= 1.
    """
    A = np.atleast_2d(np.asarray(A, float))
    Q = np.atleast_2d(np.asarray(Q, float))
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    if np.max(np.abs(np.linalg.eigvals(A))) >= 1.0 - TOL_SPEC:
        raise InstabilityError("Stein equation requires a Schur-stable A")
    Z = sla.solve_discrete_lyapunov(A.T, Q, method="bilinear")
    Z = _symmetrize(Z)
    res = np.linalg.norm(A.T @ Z @ A - Z + Q)
    if res > tol * (1.0 + np.linalg.norm(Z)):
        raise CertificateResidualError(f"Stein residual {res:.2e} exceeds tolerance")
    return Z


def _conj_response(A, B, C, D, z: complex) -> np.ndarray:
    """Value of G*(z) = G(1/z)^T on the unit circle (z on the circle)."""
    n = A.shape[0]
    if n == 0:
        return D.T.astype(complex)
    G = C @ np.linalg.solve((1.0 / z) * np.eye(n) - A, B) + D
    return G.T


def solve_generalized_stein(A1, B1, C1, D1, A2, B2, C2, D2, M,
                            grid: int = 128, tol_fde: float = 1e-7,
                            tol_res: float = 1e-8) -> np.ndarray:
    """Cross-coupled Stein solution linking two stable realizations.

    Solves ``A1' Z A2 - Z = C1' M C2`` and verifies the three bordered
    identities ``A1' Z B2 = C1' M D2``, ``B1' Z A2 = D1' M C2`` and
    ``B1' Z B2 = D1' M D2``, which hold exactly when the cross spectrum
    ``Psi1*(z) M Psi2(z)`` vanishes on the unit circle.

    Raises
    ------
    InstabilityError
        If A1 or A2 is not Schur stable.
    FrequencyIdentityViolatedError
        If the unit-circle grid check of the vanishing cross term fails.
    CertificateResidualError
        If a bordered identity residual exceeds ``tol_res``.
    """
    A1, A2 = np.atleast_2d(np.asarray(A1, float)), np.atleast_2d(np.asarray(A2, float))
    n1, n2 = A1.shape[0], A2.shape[0]
    B1, B2, C1, C2 = (np.atleast_2d(np.asarray(M, float)) for M in (B1, B2, C1, C2))
    D1 = np.asarray(D1, float).reshape(C1.shape[0], B1.shape[1])
    D2 = np.asarray(D2, float).reshape(C2.shape[0], B2.shape[1])
    if B1.shape[0] != n1 or B2.shape[0] != n2 or C1.shape[1] != n1 or C2.shape[1] != n2:
        raise ValueError("generalized Stein data has inconsistent dimensions")
    M = np.asarray(M, float).reshape(C1.shape[0], C2.shape[0])
    for name, A in (("A1", A1), ("A2", A2)):
        if A.shape[0] and np.max(np.abs(np.linalg.eigvals(A))) >= 1.0 - TOL_SPEC:
            raise InstabilityError(f"{name} must be Schur stable")
    scale = 1.0 + float(np.linalg.norm(M))
    worst = 0.0
    for th in np.linspace(0.0, np.pi, grid):
        z = np.exp(1j * th)
        G1s = _conj_response(A1, B1, C1, D1, z)
        G2 = C2 @ np.linalg.solve(z * np.eye(n2) - A2, B2) + D2 if n2 else D2.astype(complex)
        worst = max(worst, float(np.max(np.abs(G1s @ M @ G2))) if G1s.size and G2.size else 0.0)
    if worst > tol_fde * scale:
        raise FrequencyIdentityViolatedError(
            f"Psi1* M Psi2 reaches {worst:.2e} on the unit circle (tol {tol_fde:.1e})")
    W = C1.T @ M @ C2
    if n1 == 0 or n2 == 0:
        Z = np.zeros((n1, n2))
    else:
        lhs = np.kron(A2.T, A1.T) - np.eye(n1 * n2)
        Z = np.linalg.solve(lhs, W.reshape(-1, order="F")).reshape((n1, n2), order="F")
    blocks = (
        ("Stein", A1.T @ Z @ A2 - Z - W),
        ("A'ZB", A1.T @ Z @ B2 - C1.T @ M @ D2),
        ("B'ZA", B1.T @ Z @ A2 - D1.T @ M @ C2),
        ("B'ZB", B1.T @ Z @ B2 - D1.T @ M @ D2),
    )
    zscale = 1.0 + float(np.linalg.norm(Z)) + float(np.linalg.norm(M))
    for name, res in blocks:
        r = float(np.linalg.norm(res)) if res.size else 0.0
        if r > tol_res * zscale:
            raise CertificateResidualError(
                f"generalized Stein block {name} residual {r:.2e} exceeds tolerance")
    return Z


def split_indefinite(X: np.ndarray, tol_eig: float = 1e-9):
    """Minimal split ``X = L1' L1 - L2' L2`` of a symmetric matrix.

    Row counts of L1 and L2 equal the numbers of eigenvalues above
    ``tol_eig * max|eig|`` and below its negative, respectively.
    """
    X = np.atleast_2d(np.asarray(X, float))
    n = X.shape[0]
    if n == 0:
        return np.zeros((0, 0)), np.zeros((0, 0))
    lam, V = np.linalg.eigh(_symmetrize(X))
    cut = tol_eig * max(np.max(np.abs(lam)), 1e-300)
    pos = lam > cut
    neg = lam < -cut
    L1 = (np.sqrt(lam[pos])[:, None] * V[:, pos].T) if np.any(pos) else np.zeros((0, n))
    L2 = (np.sqrt(-lam[neg])[:, None] * V[:, neg].T) if np.any(neg) else np.zeros((0, n))
    return L1, L2
