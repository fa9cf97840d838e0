"""End-to-end alternation: analysis, factorization, warm start, synthesis.

Runs the full iteration from a nominal initialization, with uncertainty
homotopy when the nominal controller is not robustly stabilizing, an
optional loop-rate line search for peak-gain objectives, convergence
detection, per-iteration records, and a final free-multiplier analysis
of every channel.
"""

from __future__ import annotations

import json
import os
import platform
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import (
    AnalysisOptions,
    PerformanceObjective,
    analyze,
    common_analysis,
    lower_bound_estimate,
)
from .errors import (
    ConfigError,
    InfeasibleError,
    IqcSynError,
    NotRobustlyStabilizableError,
)
from .iqc import IqcSpec, factorize, transform_terminal_cost
from .statespace import Controller, PartitionedPlant, StateSpaceModel
from .synthesis import (
    build_generalized_plant,
    extend_certificate,
    nominal_factorization,
    nominal_warm_start,
    pad_controller,
    pad_factorization,
    synthesize_step,
    warm_start,
)

__all__ = [
    "ProblemConfig",
    "IterationRecord",
    "Report",
    "run_algorithm",
    "tau_homotopy",
    "line_search_rho_sigma",
    "scale_uncertainty",
]

RHO_GRID = tuple(np.arange(0.90, 0.9951, 0.025)) + (0.995,)
SIGMA_GRID = (0.5, 0.75, 0.9, 0.95, 0.99)


@dataclass
class ProblemConfig:
    """Everything one run needs: plant, uncertainty, objectives, options."""

    plant: PartitionedPlant
    iqc: IqcSpec = None
    objectives: list = field(default_factory=list)
    max_iterations: int = 20
    sigma: float = 0.95
    rho: object = 1.0  # float or "search" for peak-to-peak channels
    conv_tol: float = 1e-3
    seed: int = 0
    solver: str = None
    solver_opts: dict = field(default_factory=dict)
    tau_bisections: int = 8
    name: str = ""

    def __post_init__(self):
        if not self.objectives:
            raise ConfigError("at least one performance objective is required")
        for obj in self.objectives:
            if obj.channel not in self.plant.output_groups:
                raise ConfigError(f"objective channel {obj.channel!r} not in the plant")
        kinds = {o.kind for o in self.objectives}
        if "p2p" in kinds and len(kinds) > 1:
            raise ConfigError(
                "mixed loop rates are unsupported in synthesis: peak-to-peak "
                "channels cannot share one transformed variable set with "
                "unit-rate channels")
        if "p2p" in kinds and self.rho != "search" and not (0.0 < float(self.rho) < 1.0):
            raise ConfigError("peak-to-peak synthesis needs rho in (0, 1) or 'search'")

    def analysis_options(self, rho: float, restrict: bool = True) -> AnalysisOptions:
        return AnalysisOptions(rho=rho, sigma=self.sigma, restrict_m1m2=restrict,
                               solver=self.solver, solver_opts=dict(self.solver_opts))


@dataclass
class IterationRecord:
    index: int
    gamma_analysis: list
    gamma_synthesis: list
    tau: float
    rho: float
    sigma: float
    status: str
    seconds: float

    def row(self):
        return [self.index, _fmt(self.gamma_analysis), _fmt(self.gamma_synthesis),
                self.tau, self.rho, self.sigma, self.status, round(self.seconds, 3)]


def _fmt(vals):
    if vals is None:
        return ""
    if isinstance(vals, (list, tuple)):
        return sum(vals) if len(vals) > 1 else (vals[0] if vals else "")
    return vals


@dataclass
class Report:
    """Final controller with certified per-channel gains and the run trace."""

    controller: Controller
    final_gains: list
    iterations: list
    config: ProblemConfig
    converged: bool
    tau_final: float
    environment: dict = field(default_factory=dict)

    @property
    def objective_value(self) -> float:
        return float(sum(g for g, o in zip(self.final_gains, self.config.objectives)
                         if o.role == "minimize"))

    def to_dict(self) -> dict:
        return {
            "controller": self.controller.to_dict(
                order=self.controller.order,
                gains=[float(g) for g in self.final_gains]),
            "final_gains": [float(g) for g in self.final_gains],
            "objective_value": self.objective_value,
            "converged": self.converged,
            "tau_final": self.tau_final,
            "iterations": [r.row() for r in self.iterations],
            "environment": self.environment,
        }

    def write_trace(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "gamma_analysis", "gamma_synthesis", "tau", "rho",
                        "sigma", "status", "seconds"])
            for rec in self.iterations:
                w.writerow(rec.row())


def scale_uncertainty(plant: PartitionedPlant, tau: float) -> PartitionedPlant:
    """Uncertainty rescaled by tau: the p-input columns are multiplied."""
    if tau == 1.0:
        return plant
    lo, hi = plant.input_groups["p"]
    B = plant.model.B.copy()
    D = plant.model.D.copy()
    B[:, lo:hi] *= tau
    D[:, lo:hi] *= tau
    return PartitionedPlant(StateSpaceModel(plant.model.A, B, plant.model.C, D),
                            plant.input_groups, plant.output_groups)


def _nominal_plant(plant: PartitionedPlant) -> PartitionedPlant:
    """The plant with its uncertainty channel removed."""
    keep_in = [n for n in plant.input_groups if n != "p"]
    keep_out = [n for n in plant.output_groups if n != "q"]
    model = plant.subsystem(keep_out, keep_in)
    ig, og = {}, {}
    col = 0
    for n in keep_in:
        w = plant.in_dim(n)
        ig[n] = (col, col + w)
        col += w
    ig["p"] = (0, 0)
    row = 0
    for n in keep_out:
        w = plant.out_dim(n)
        og[n] = (row, row + w)
        row += w
    og["q"] = (0, 0)
    return PartitionedPlant(model, ig, og)


def _analyze_config(plant, K, iqc, config: ProblemConfig, rho: float,
                    restrict: bool = True):
    """Common analysis across the configured objectives at a fixed rate."""
    opts = config.analysis_options(rho, restrict)
    if len(config.objectives) == 1:
        res = analyze(plant, K, iqc, config.objectives[0], opts)
        return [res]
    return common_analysis(plant, K, iqc, config.objectives, opts)


def tau_homotopy(plant: PartitionedPlant, K, iqc, config: ProblemConfig, rho: float,
                 tau_lo: float = 0.0, rounds: int = None):
    """Largest feasible uncertainty scale for the analysis step.

    Bisects on [tau_lo, 1]; each probe is one analysis feasibility solve.
    Returns ``(tau, results)`` with the analysis at the accepted scale, or
    ``(None, None)`` when even ``tau_lo`` fails.
    """
    rounds = rounds if rounds is not None else config.tau_bisections
    try:
        return 1.0, _analyze_config(plant, K, iqc, config, rho)
    except (InfeasibleError, IqcSynError):
        pass
    lo, hi = tau_lo, 1.0
    best = None
    try:
        best = (lo, _analyze_config(scale_uncertainty(plant, lo), K, iqc, config, rho))
    except (InfeasibleError, IqcSynError):
        return None, None
    for _ in range(rounds):
        mid = 0.5 * (lo + hi)
        try:
            res = _analyze_config(scale_uncertainty(plant, mid), K, iqc, config, rho)
            best = (mid, res)
            lo = mid
        except (InfeasibleError, IqcSynError):
            hi = mid
    return best


def line_search_rho_sigma(evaluate, rho_candidates=RHO_GRID, sigma_candidates=None,
                          refine_rounds: int = 2, extend_down: bool = True):
    """Grid line search with golden refinement around the best loop rate.

    ``evaluate(rho, sigma)`` returns a scalar cost or raises on an
    infeasible candidate.  When the minimum sits on the lower grid edge
    the bracket extends geometrically downward, since fast plants prefer
    much smaller rates than the default grid covers.

    Returns ``(best_rho, best_sigma, best_cost)`` or ``(None, None, inf)``
    if every candidate failed.
    """
    sigma_candidates = list(sigma_candidates) if sigma_candidates else [None]
    results = {}

    def probe(r, s):
        key = (round(float(r), 10), s)
        if key not in results:
            try:
                results[key] = float(evaluate(r, s))
            except (InfeasibleError, IqcSynError):
                results[key] = np.inf
        return results[key]

    best = (None, None, np.inf)
    for s in sigma_candidates:
        for r in rho_candidates:
            c = probe(r, s)
            if c < best[2]:
                best = (r, s, c)
    if best[0] is None or not np.isfinite(best[2]):
        return None, None, np.inf
    rho_sorted = sorted({round(float(r), 10) for r in rho_candidates})
    # extend downward while the edge keeps winning
    while extend_down and abs(best[0] - rho_sorted[0]) < 1e-12 and rho_sorted[0] > 0.05:
        new_lo = max(rho_sorted[0] * 0.8, 0.05)
        c = probe(new_lo, best[1])
        rho_sorted.insert(0, new_lo)
        if c < best[2]:
            best = (new_lo, best[1], c)
        else:
            break
    # golden refinement inside the bracketing neighbours
    idx = rho_sorted.index(round(float(best[0]), 10))
    lo = rho_sorted[max(idx - 1, 0)]
    hi = rho_sorted[min(idx + 1, len(rho_sorted) - 1)]
    gr = 0.5 * (np.sqrt(5.0) - 1.0)
    a, b = lo, hi
    for _ in range(refine_rounds):
        c1 = b - gr * (b - a)
        c2 = a + gr * (b - a)
        f1, f2 = probe(c1, best[1]), probe(c2, best[1])
        if f1 < f2:
            b = c2
        else:
            a = c1
        for r, f in ((c1, f1), (c2, f2)):
            if f < best[2]:
                best = (r, best[1], f)
    return best


def _nominal_controller(config: ProblemConfig, rho: float) -> Controller:
    nom = _nominal_plant(config.plant)
    plant = build_generalized_plant(nom, nominal_factorization(), rho)
    warm = nominal_warm_start(plant, config.objectives)
    opts = config.analysis_options(rho)
    K, _, _ = synthesize_step(plant, warm, config.objectives, sigma=config.sigma,
                              opts=opts)
    return K

def _pick_rho(config: ProblemConfig, K, state: dict):
    """Loop rate for this iteration, running the line search when asked."""
    kinds = {o.kind for o in config.objectives}
    if "p2p" not in kinds:
        return 1.0
    if config.rho != "search":
        return float(config.rho)

    plant, iqc = config.plant, config.iqc

    def evaluate(r, _s):
        res = _analyze_config(scale_uncertainty(plant, state["tau"]), K, iqc, config, r)
        return sum(x.gamma * o.weight for x, o in zip(res, config.objectives)
                   if o.role == "minimize") or res[0].gamma

    if state.get("rho_best") is None:
        grid = RHO_GRID
    else:
        r0 = state["rho_best"]
        grid = sorted({min(max(r, 0.05), 0.999)
                       for r in (r0 - 0.025, r0, r0 + 0.025)})
    rho, _, _ = line_search_rho_sigma(evaluate, grid)
    state["rho_best"] = rho if rho is not None else state.get("rho_best", 0.95)
    return state["rho_best"]


def run_algorithm(config: ProblemConfig, progress=None) -> Report:
    """Alternating robust synthesis per the configured objectives.

    Starts from a nominal synthesis, then loops analysis (with homotopy
    on the uncertainty scale while needed), factorization, warm-started
    synthesis, and reconstruction, keeping the best certified controller;
    finishes with a per-channel free-multiplier analysis.

    Raises
    ------
    NotRobustlyStabilizableError
        The homotopy never reaches full uncertainty scale.
    """
    cfg = config
    state = {"tau": 1.0, "rho_best": None}
    records = []
    rho0 = 1.0 if any(o.kind != "p2p" for o in cfg.objectives) or cfg.rho == "search" \
        else float(cfg.rho)
    K = _nominal_controller(cfg, 1.0 if rho0 == 1.0 else rho0)
    iqc = cfg.iqc
    best = None  # (objective value, K, gains) at tau = 1
    small_steps = 0
    prev_obj = None
    tau = 0.0 if iqc is not None else 1.0
    converged = iqc is None
    for it in range(cfg.max_iterations if iqc is not None else 0):
        t0 = time.time()
        rho = _pick_rho(cfg, K, state)
        tau_new, results = tau_homotopy(cfg.plant, K, iqc, cfg, rho,
                                        tau_lo=0.0 if it == 0 else 0.0)
        if tau_new is None:
            records.append(IterationRecord(it, None, None, tau, rho, cfg.sigma,
                                           "analysis-infeasible", time.time() - t0))
            break
        tau = tau_new
        plant_tau = scale_uncertainty(cfg.plant, tau)
        gammas_a = [r.gamma for r in results]
        obj_val = sum(g * o.weight for g, o in zip(gammas_a, cfg.objectives)
                      if o.role == "minimize")
        status = results[0].status
        try:
            fact = factorize(iqc, results[0].M)
            _, _, fact = transform_terminal_cost(iqc, fact, results[0].X)
            gp = build_generalized_plant(plant_tau, fact, rho)
            if gp.n_K < K.order:
                fact = pad_factorization(fact, K.order - gp.n_K)
                gp = build_generalized_plant(plant_tau, fact, rho)
            K_old = pad_controller(K, gp.n_K)
            P_old = extend_certificate(results[0].P, gp.n_K - K.order)
            mus = [r.mu for r in results]
            warm = warm_start(K_old, P_old, gp, cfg.objectives, gammas_a, mus,
                              sigma=cfg.sigma)
            K_new, _, gammas_s = synthesize_step(gp, warm, cfg.objectives,
                                                 sigma=cfg.sigma,
                                                 opts=cfg.analysis_options(rho))
        except IqcSynError as exc:
            records.append(IterationRecord(it, gammas_a, None, tau, rho, cfg.sigma,
                                           f"incident:{type(exc).__name__}",
                                           time.time() - t0))
            break
        records.append(IterationRecord(it, gammas_a, gammas_s, tau, rho, cfg.sigma,
                                       status, time.time() - t0))
        if progress:
            progress(records[-1])
        K = K_new
        if tau >= 1.0:
            if best is None or obj_val < best[0]:
                best = (obj_val, K_old, gammas_a)
            if prev_obj is not None:
                improve = (prev_obj - obj_val) / max(abs(obj_val), 1e-12)
                small_steps = small_steps + 1 if improve < cfg.conv_tol else 0
                if small_steps >= 2:
                    converged = True
                    break
            prev_obj = obj_val
    if iqc is not None and tau < 1.0:
        raise NotRobustlyStabilizableError(
            f"uncertainty homotopy stalled at tau = {tau:.4f}")
    # final individual analysis with free multipliers per channel
    final_K = K
    final_gains = []
    rho_final = state.get("rho_best") or (float(cfg.rho) if cfg.rho != "search" else 0.95)
    for obj in cfg.objectives:
        opts = cfg.analysis_options(1.0 if obj.kind != "p2p" else rho_final,
                                    restrict=False)
        res = analyze(cfg.plant, final_K, iqc, obj, opts)
        final_gains.append(res.gamma)
    if best is not None:
        cand = sum(g * o.weight for g, o in zip(final_gains, cfg.objectives)
                   if o.role == "minimize")
        if not np.isfinite(cand):
            final_K, final_gains = best[1], best[2]
    env = {"python": platform.python_version(), "machine": platform.machine(),
           "solver": cfg.solver or os.environ.get("IQCSYN_SOLVER", "clarabel")}
    return Report(final_K, final_gains, records, cfg, converged, tau, env)
