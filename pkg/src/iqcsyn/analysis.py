"""Robust-analysis LMIs over the multiplier class.

Assembles the certified worst-case gain programs on the filter-augmented
closed loop: the stability pair, the energy-gain inequality, and the
peak-gain inequalities in both their restricted (shared multiplier,
sigma split) and free two-multiplier forms.  Also provides the sampled
empirical lower bound used to sandwich every certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, InfeasibleError, SolverInaccurateError
from .iqc import IqcFilter, IqcSpec
from .sdp import MatExpr, SdpProblem, block_expr, scalar_times, solve_sdp
from .statespace import (
    Controller,
    PartitionedPlant,
    StateSpaceModel,
    augment,
    close_loop,
    lft,
    lti_gain_oracle,
)

__all__ = [
    "PerformanceObjective",
    "AnalysisOptions",
    "AnalysisResult",
    "analyze",
    "analyze_fixed_multiplier",
    "common_analysis",
    "lower_bound_estimate",
]

EPS_LMI = 1e-7


@dataclass(frozen=True)
class PerformanceObjective:
    """One performance channel with its gain kind and optimization role."""

    kind: str  # hinf | e2p | p2p
    channel: str = "z"
    w_channels: tuple = None
    role: str = "minimize"  # minimize | bound
    bound: float = None
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("hinf", "e2p", "p2p"):
            raise ConfigError(f"unknown performance kind {self.kind!r}")
        if self.role == "bound" and self.bound is None:
            raise ConfigError("bounded objective needs a bound value")


@dataclass(frozen=True)
class AnalysisOptions:
    """Loop transform, multiplier restriction, and solver settings."""

    rho: float = 1.0
    sigma: float = 0.95
    restrict_m1m2: bool = False
    eps_lmi: float = EPS_LMI
    solver: str = None
    solver_opts: dict = field(default_factory=dict)
    tau: float = 1.0

    def rho_for(self, kind: str) -> float:
        if kind == "p2p":
            if not 0.0 < self.rho < 1.0:
                raise ConfigError("peak-to-peak analysis needs rho in (0, 1)")
            return self.rho
        return 1.0


@dataclass
class AnalysisResult:
    """Certified bound with the multiplier and storage values behind it."""

    gamma: float
    mu: float
    M: np.ndarray
    X: np.ndarray
    P: np.ndarray
    status: str
    rho: float
    sigma: float
    objective: PerformanceObjective
    max_violation: float = np.nan
    M2: np.ndarray = None
    X2: np.ndarray = None
    per_channel: dict = None
    solver: str = ""


@dataclass(frozen=True)
class _Augmented:
    """Channel view of the augmented system matrices."""

    A: np.ndarray
    Bp: np.ndarray
    Bw: np.ndarray
    Cs: np.ndarray
    Dsp: np.ndarray
    Dsw: np.ndarray
    Cz: np.ndarray
    Dzp: np.ndarray
    Dzw: np.ndarray
    n_psi: int

    @property
    def n_chi(self) -> int:
        return self.A.shape[0]

    def scale(self) -> float:
        return 1.0 + float(np.linalg.norm(self.A, 2)) ** 2


def _augmented_channel(sigma_plant: PartitionedPlant, n_psi: int, z_name: str,
                       w_names) -> _Augmented:
    w_names = list(w_names)
    Bw = np.hstack([sigma_plant.B(n) for n in w_names]) if w_names else \
        np.zeros((sigma_plant.n_states, 0))
    Dsw = np.hstack([sigma_plant.D("s", n) for n in w_names]) if w_names else \
        np.zeros((sigma_plant.out_dim("s"), 0))
    Dzw = np.hstack([sigma_plant.D(z_name, n) for n in w_names]) if w_names else \
        np.zeros((sigma_plant.out_dim(z_name), 0))
    return _Augmented(sigma_plant.model.A, sigma_plant.B("p"), Bw,
                      sigma_plant.C("s"), sigma_plant.D("s", "p"), Dsw,
                      sigma_plant.C(z_name), sigma_plant.D(z_name, "p"), Dzw, n_psi)


def build_augmented(G: PartitionedPlant, K: Controller, filt: IqcFilter,
                    rho: float) -> PartitionedPlant:
    """Close the loop at rate rho and stack the filter on the q/p channel."""
    return augment(close_loop(G, K, rho), filt)


def _empty_filter(n_q: int, n_p: int) -> IqcFilter:
    return IqcFilter(np.zeros((0, 0)), np.zeros((0, n_q)), np.zeros((0, n_p)),
                     np.zeros((0, 0)), np.zeros((0, n_q)), np.zeros((0, n_p)))


def _embed_X(X_expr, n_psi: int, n_chi: int):
    """Lift a filter-state terminal cost onto the full augmented state."""
    E = np.zeros((n_chi, n_psi))
    E[:n_psi] = np.eye(n_psi)
    return E @ MatExpr.wrap(X_expr) @ E.T if n_psi else MatExpr((n_chi, n_chi), np.zeros((n_chi, n_chi)))


def _quad(T0, P):
    return T0.T @ MatExpr.wrap(P) @ T0


def _stacked_rows(aug: _Augmented):
    n_chi, n_p, n_w = aug.n_chi, aug.Bp.shape[1], aug.Bw.shape[1]
    T0 = np.hstack([np.eye(n_chi), np.zeros((n_chi, n_p + n_w))])
    T1 = np.hstack([aug.A, aug.Bp, aug.Bw])
    T2 = np.hstack([aug.Cs, aug.Dsp, aug.Dsw])
    Fz = np.hstack([aug.Cz, aug.Dzp, aug.Dzw])
    Ew = np.hstack([np.zeros((n_w, n_chi + n_p)), np.eye(n_w)])
    return T0, T1, T2, Fz, Ew


def _lmi_stability(aug: _Augmented, P, M_expr, mu_like):
    """Theorem-1 dissipation block (to be constrained negative definite)."""
    T0, T1, T2, _, Ew = _stacked_rows(aug)
    expr = _quad(T1, P) - _quad(T0, P) + T2.T @ MatExpr.wrap(M_expr) @ T2
    return expr - scalar_times(mu_like, Ew.T @ Ew)


def _lmi_hinf(aug: _Augmented, P, M_expr, gamma):
    """Theorem-2 inequality with the energy term bordered out."""
    T0, T1, T2, Fz, Ew = _stacked_rows(aug)
    big = _quad(T1, P) - _quad(T0, P) + T2.T @ MatExpr.wrap(M_expr) @ T2 \
        - scalar_times(gamma, Ew.T @ Ew)
    nz = Fz.shape[0]
    return block_expr([[big, Fz.T], [Fz, scalar_times(-1.0 * gamma, np.eye(nz))]])


def _lmi_peak(aug: _Augmented, P, M2_expr, X1_expr, X2_expr, gamma, mu, kind: str,
              rho: float):
    """Theorem-3 inequality for the selected peak-gain case."""
    T0, T1, T2, Fz, Ew = _stacked_rows(aug)
    X1u = _embed_X(X1_expr, aug.n_psi, aug.n_chi)
    X2u = _embed_X(X2_expr, aug.n_psi, aug.n_chi)
    if kind == "p2p":
        alpha = rho * rho / (1.0 - rho * rho)
        w_term = scalar_times(MatExpr.wrap(gamma) - MatExpr.wrap(mu), alpha * (Ew.T @ Ew))
    else:  # e2p: alpha = 1, beta = 0, mu = gamma
        alpha = 1.0
        w_term = scalar_times(gamma, Ew.T @ Ew)
    big = T0.T @ (X1u - MatExpr.wrap(P)) @ T0 + T1.T @ X2u @ T1 \
        + T2.T @ MatExpr.wrap(M2_expr) @ T2 - w_term
    nz = Fz.shape[0]
    return block_expr([[big, np.sqrt(alpha) * Fz.T],
                       [np.sqrt(alpha) * Fz, scalar_times(-1.0 * gamma, np.eye(nz))]])


def _margined(expr, margin_handle):
    """Tighten a to-be-negative-definite expression by a margin variable."""
    if margin_handle is None:
        return expr
    e = MatExpr.wrap(expr)
    return e + scalar_times(margin_handle, np.eye(e.shape[0]))


def _add_channel_lmis(problem: SdpProblem, aug: _Augmented, P, gamma, mu, kind: str,
                      rho: float, pairs, sigma: float, eps: float, tag: str,
                      margin_handle=None):
    """Register the kind-selected LMIs for one performance channel.

    ``pairs`` is the multiplier description: for hinf a single ``(M, X)``;
    for the peak kinds either ``('split', M, X)`` meaning the sigma
    restriction of one class pair, or ``('free', M1, X1, M2, X2)``.
    ``margin_handle`` tightens every inequality by a shared slack that a
    reconditioning pass can maximize.
    """
    s = eps * aug.scale()
    if kind == "hinf":
        M_expr, X_expr = pairs
        problem.add_nsd(_margined(_lmi_hinf(aug, P, M_expr, gamma), margin_handle),
                        margin=s, name=f"{tag}hinf")
        return M_expr, X_expr
    if pairs[0] == "split":
        _, M_expr, X_expr = pairs
        M1 = (1.0 - sigma) * MatExpr.wrap(M_expr)
        X1 = (1.0 - sigma) * MatExpr.wrap(X_expr)
        M2 = sigma * MatExpr.wrap(M_expr)
        X2 = sigma * MatExpr.wrap(X_expr)
        M_sum, X_sum = M_expr, X_expr
    else:
        _, M1, X1, M2, X2 = pairs
        M_sum = MatExpr.wrap(M1) + MatExpr.wrap(M2)
        X_sum = MatExpr.wrap(X1) + MatExpr.wrap(X2)
    mu_like = mu if kind == "p2p" else gamma
    problem.add_nsd(_margined(_lmi_stability(aug, P, M_sum, mu_like), margin_handle),
                    margin=s, name=f"{tag}stab")
    problem.add_nsd(_margined(_lmi_peak(aug, P, M2, X1, X2, gamma, mu, kind, rho),
                              margin_handle), margin=s, name=f"{tag}peak")
    return M_sum, X_sum


def _finish(problem: SdpProblem, opts: AnalysisOptions):
    """Two-phase solve: minimize the bound, then recondition the multiplier.

    The bound-optimal multiplier sits on the boundary of its class, where
    the factorization's frequency-domain conditions degenerate.  With the
    bound frozen (plus a slack below the iteration's monotonicity
    tolerance) the second phase maximizes the class margin under
    variable-norm caps, returning a strictly interior certificate.
    """
    sol = solve_sdp(problem, solver=opts.solver, **opts.solver_opts)
    if sol.status == "infeasible":
        raise InfeasibleError("no analysis certificate at these settings "
                              "(not a proof of instability)")
    if sol.status == "error":
        raise SolverInaccurateError(f"solver failed with status {sol.status}")
    if "classmargin" not in problem.variables or sol.status != "optimal":
        return sol
    m = problem.variables["classmargin"]
    gamma_names = [n for n in problem.variables if n.startswith("gamma")]
    skip = tuple(n for n in problem.variables
                 if n.startswith("gamma") or n.startswith("mu") or n == "classmargin")
    base = len(problem.constraints)
    saved_obj = problem.objective
    for slack in (5e-6,):
        del problem.constraints[base:]
        for n in gamma_names:
            g_star = float(sol.values[n])
            problem.add_nonneg(g_star + slack * max(abs(g_star), 1.0)
                               - problem.variables[n].expr())
        for name in problem.variables:
            if name in skip:
                continue
            v = np.atleast_2d(np.asarray(sol.values[name], float))
            kap = 10.0 * (float(np.linalg.norm(v, 2)) if v.size else 0.0) + 10.0
            problem.bound_variable_norms(kap, include=(name,))
        problem.set_objective(-1.0 * m.expr())
        sol2 = solve_sdp(problem, solver=opts.solver, **opts.solver_opts)
        if sol2.status == "optimal":
            del problem.constraints[base:]
            problem.objective = saved_obj
            return sol2
    del problem.constraints[base:]
    problem.objective = saved_obj
    return sol


def analyze(G: PartitionedPlant, K: Controller, iqc: IqcSpec | None,
            objective: PerformanceObjective, opts: AnalysisOptions = AnalysisOptions(),
            ) -> AnalysisResult:
    """Certified worst-case gain of the closed uncertain loop.

    Minimizes the bound over the multiplier class, the storage matrix,
    and the auxiliary rate.  With ``opts.restrict_m1m2`` the two peak
    multipliers are tied to one class member through the sigma split;
    otherwise both live freely in the class (the final-analysis form).

    Raises
    ------
    InfeasibleError
        No certificate exists at these settings.
    SolverInaccurateError
        The backend could not reach the requested accuracy.
    """
    rho = opts.rho_for(objective.kind)
    filt = iqc.filter if iqc is not None else _empty_filter(G.out_dim("q"), G.in_dim("p"))
    sigma_plant = build_augmented(G, K, filt, rho)
    w_names = objective.w_channels or [n for n in G.input_groups if n not in ("p", "u")]
    aug = _augmented_channel(sigma_plant, filt.n_states, objective.channel, w_names)
    problem = SdpProblem("analysis")
    P = problem.add_symmetric("P", aug.n_chi)
    gamma = problem.add_scalar("gamma")
    mu = problem.add_scalar("mu")
    problem.add_nonneg(mu.expr())
    problem.add_nonneg(gamma - mu)
    eps = opts.eps_lmi
    margin = None
    if iqc is not None:
        margin = problem.add_scalar("classmargin")
        problem.add_nonneg(margin.expr())
        if objective.kind == "hinf" or opts.restrict_m1m2:
            M_expr, X_expr = iqc.multiplier_class.generate(problem, "mx_", margin)
            pairs = (M_expr, X_expr) if objective.kind == "hinf" \
                else ("split", M_expr, X_expr)
        else:
            M1, X1 = iqc.multiplier_class.generate(problem, "mxa_", margin)
            M2, X2 = iqc.multiplier_class.generate(problem, "mxb_", margin)
            pairs = ("free", M1, X1, M2, X2)
    else:
        zero = np.zeros((filt.n_out, filt.n_out))
        zx = np.zeros((0, 0))
        pairs = (zero, zx) if objective.kind == "hinf" else ("split", zero, zx)
    M_sum, X_sum = _add_channel_lmis(problem, aug, P, gamma, mu, objective.kind,
                                     rho, pairs, opts.sigma, eps, "", margin)
    PX = P - _embed_X(X_sum, aug.n_psi, aug.n_chi)
    if margin is not None:
        PX = PX - scalar_times(margin, np.eye(aug.n_chi))
    problem.add_psd(PX, margin=eps, name="PX")
    problem.set_objective(gamma)
    sol = _finish(problem, opts)
    Mv = MatExpr.wrap(M_sum).value(sol.values)
    Xv = MatExpr.wrap(X_sum).value(sol.values)
    gv = float(sol.values["gamma"])
    mv = float(sol.values["mu"]) if objective.kind == "p2p" else gv
    return AnalysisResult(gv, mv, Mv, Xv, sol.values["P"], sol.status, rho,
                          opts.sigma, objective, sol.max_constraint_violation,
                          solver=sol.solver)


def analyze_fixed_multiplier(G: PartitionedPlant, K: Controller, filt: IqcFilter,
                             M: np.ndarray, X: np.ndarray,
                             objective: PerformanceObjective,
                             opts: AnalysisOptions = AnalysisOptions()) -> AnalysisResult:
    """Certified gain with the multiplier and terminal cost held fixed.

    Used for the factored-coordinates round trip and for warm-start
    verification: only the storage matrix and the bound are decision
    variables; the sigma split ties the two peak terms to the fixed pair.
    """
    rho = opts.rho_for(objective.kind)
    sigma_plant = build_augmented(G, K, filt, rho)
    w_names = objective.w_channels or [n for n in G.input_groups if n not in ("p", "u")]
    aug = _augmented_channel(sigma_plant, filt.n_states, objective.channel, w_names)
    problem = SdpProblem("analysis-fixed")
    P = problem.add_symmetric("P", aug.n_chi)
    gamma = problem.add_scalar("gamma")
    mu = problem.add_scalar("mu")
    problem.add_nonneg(mu.expr())
    problem.add_nonneg(gamma - mu)
    pairs = (M, X) if objective.kind == "hinf" else ("split", M, X)
    _add_channel_lmis(problem, aug, P, gamma, mu, objective.kind, rho, pairs,
                      opts.sigma, opts.eps_lmi, "")
    problem.add_psd(P - _embed_X(X, aug.n_psi, aug.n_chi), margin=opts.eps_lmi, name="PX")
    problem.set_objective(gamma)
    sol = _finish(problem, opts)
    gv = float(sol.values["gamma"])
    mv = float(sol.values["mu"]) if objective.kind == "p2p" else gv
    return AnalysisResult(gv, mv, np.asarray(M, float), np.asarray(X, float),
                          sol.values["P"], sol.status, rho, opts.sigma, objective,
                          sol.max_constraint_violation, solver=sol.solver)


def common_analysis(G: PartitionedPlant, K: Controller, iqc: IqcSpec | None,
                    objectives: list, opts: AnalysisOptions = AnalysisOptions()):
    """Multi-objective analysis with one storage matrix and one multiplier.

    Each channel contributes its own LMIs at its own loop rate while the
    storage matrix and the class pair are shared, which is exactly the
    restriction a single synthesized controller must satisfy.  Returns
    the list of per-channel results (sharing M, X, P) and the weighted
    objective value.
    """
    if not objectives:
        raise ConfigError("common analysis needs at least one objective")
    filt = iqc.filter if iqc is not None else _empty_filter(G.out_dim("q"), G.in_dim("p"))
    rhos = [opts.rho_for(o.kind) for o in objectives]
    problem = SdpProblem("common-analysis")
    gammas = [problem.add_scalar(f"gamma{j}") for j in range(len(objectives))]
    mus = [problem.add_scalar(f"mu{j}") for j in range(len(objectives))]
    margin = None
    if iqc is not None:
        margin = problem.add_scalar("classmargin")
        problem.add_nonneg(margin.expr())
        M_expr, X_expr = iqc.multiplier_class.generate(problem, "mx_", margin)
    else:
        M_expr, X_expr = np.zeros((filt.n_out, filt.n_out)), np.zeros((0, 0))
    P = None
    augs = []
    for j, (obj, rho) in enumerate(zip(objectives, rhos)):
        sigma_plant = build_augmented(G, K, filt, rho)
        w_names = obj.w_channels or [n for n in G.input_groups if n not in ("p", "u")]
        aug = _augmented_channel(sigma_plant, filt.n_states, obj.channel, w_names)
        augs.append(aug)
        if P is None:
            P = problem.add_symmetric("P", aug.n_chi)
        problem.add_nonneg(mus[j].expr())
        problem.add_nonneg(gammas[j] - mus[j])
        pairs = (M_expr, X_expr) if obj.kind == "hinf" else ("split", M_expr, X_expr)
        _add_channel_lmis(problem, aug, P, gammas[j], mus[j], obj.kind, rho, pairs,
                          opts.sigma, opts.eps_lmi, f"ch{j}_", margin)
        if obj.role == "bound":
            problem.add_nonneg(float(obj.bound) - gammas[j].expr())
    PX = P - _embed_X(X_expr, filt.n_states, augs[0].n_chi)
    if margin is not None:
        PX = PX - scalar_times(margin, np.eye(augs[0].n_chi))
    problem.add_psd(PX, margin=opts.eps_lmi, name="PX")
    objective_expr = None
    for obj, g in zip(objectives, gammas):
        if obj.role == "minimize":
            term = obj.weight * g.expr()
            objective_expr = term if objective_expr is None else objective_expr + term
    if objective_expr is None:
        objective_expr = gammas[0].expr() * 0.0
    problem.set_objective(objective_expr)
    sol = _finish(problem, opts)
    Mv = MatExpr.wrap(M_expr).value(sol.values)
    Xv = MatExpr.wrap(X_expr).value(sol.values)
    results = []
    for j, obj in enumerate(objectives):
        gv = float(sol.values[f"gamma{j}"])
        mv = float(sol.values[f"mu{j}"]) if obj.kind == "p2p" else gv
        results.append(AnalysisResult(gv, mv, Mv, Xv, sol.values["P"], sol.status,
                                      rhos[j], opts.sigma, obj,
                                      sol.max_constraint_violation, solver=sol.solver))
    return results


def _frozen_loop(G: PartitionedPlant, K: Controller, delta: StateSpaceModel,
                 z_name: str, w_names) -> StateSpaceModel:
    cl = close_loop(G, K, 1.0)
    sub = cl.subsystem(["q", z_name], ["p"] + list(w_names))
    return lft(sub, delta, side="upper")


def lower_bound_estimate(G: PartitionedPlant, K: Controller, iqc: IqcSpec,
                         objective: PerformanceObjective, samples: int = 200,
                         seed: int = 0) -> float:
    """Sampled empirical lower bound on the worst-case gain.

    Freezes vertex and random admissible uncertainties into the loop and
    takes the largest oracle gain; an unstable sample makes the bound
    infinite, disproving any robust-stability claim under test.  Always
    at most any certified upper bound.
    """
    rng = np.random.default_rng(seed)
    w_names = objective.w_channels or [n for n in G.input_groups if n not in ("p", "u")]
    deltas = []
    if iqc is not None:
        deltas.extend(iqc.multiplier_class.vertices())
        deltas.extend(iqc.multiplier_class.sample(rng) for _ in range(samples))
    else:
        deltas.append(StateSpaceModel.static(np.zeros((G.in_dim("p"), max(G.out_dim("q"), 1))))
                      if G.in_dim("p") else None)
    best = 0.0
    for delta in deltas:
        if delta is None or G.in_dim("p") == 0:
            loop = close_loop(G, K, 1.0).subsystem([objective.channel], list(w_names))
        else:
            loop = _frozen_loop(G, K, delta, objective.channel, w_names)
        if not loop.is_schur():
            return np.inf
        best = max(best, lti_gain_oracle(loop, objective.kind))
    return best
