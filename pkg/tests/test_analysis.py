import numpy as np
import pytest

from iqcsyn.analysis import (
    AnalysisOptions,
    PerformanceObjective,
    analyze,
    analyze_fixed_multiplier,
    common_analysis,
    lower_bound_estimate,
)
from iqcsyn.errors import InfeasibleError
from iqcsyn.iqc import dynamic_iqc, parametric_iqc
from iqcsyn.statespace import (
    Controller,
    PartitionedPlant,
    StateSpaceModel,
    lti_gain_oracle,
    simulate,
    Signal,
)


def nominal_plant(model: StateSpaceModel) -> PartitionedPlant:
    """Wrap a w -> z model as a plant with empty p/q/u/y channels."""
    n, m, r = model.n_states, model.n_inputs, model.n_outputs
    return PartitionedPlant(
        model,
        {"p": (0, 0), "w": (0, m), "u": (m, m)},
        {"q": (0, 0), "z": (0, r), "y": (r, r)},
    )


def uncertain_scalar_plant(delta_gain=0.3):
    """1-state loop with parametric uncertainty entering the dynamics."""
    model = StateSpaceModel(
        [[0.5]],
        [[delta_gain, 1.0, 0.0]],
        [[1.0], [1.0], [1.0]],
        np.zeros((3, 3)),
    )
    return PartitionedPlant(
        model,
        {"p": (0, 1), "w": (1, 2), "u": (2, 3)},
        {"q": (0, 1), "z": (1, 2), "y": (2, 3)},
    )


K0 = Controller.zero(0, 0)


class TestNominalEquivalence:
    def setup_method(self):
        self.model = StateSpaceModel([[0.5]], [[1.0]], [[1.0]], [[0.0]])
        self.plant = nominal_plant(self.model)

    def test_hinf_equals_oracle(self):
        res = analyze(self.plant, K0, None, PerformanceObjective("hinf"))
        assert res.gamma == pytest.approx(2.0, rel=1e-4)

    def test_e2p_equals_oracle(self):
        res = analyze(self.plant, K0, None, PerformanceObjective("e2p"))
        assert res.gamma == pytest.approx(np.sqrt(4.0 / 3.0), rel=1e-4)

    def test_p2p_bound_with_rho_search(self):
        # the scalar bound gamma(rho) = rho / sqrt((1-rho^2)(rho^2-A^2)) is
        # tight (= 2) at rho = sqrt(1/2), so a broad search must find it
        oracle = lti_gain_oracle(self.model, "p2p")
        best = np.inf
        for rho in np.arange(0.55, 0.996, 0.0125):
            try:
                res = analyze(self.plant, K0, None, PerformanceObjective("p2p"),
                              AnalysisOptions(rho=rho))
                best = min(best, res.gamma)
            except InfeasibleError:
                continue
        assert oracle - 1e-6 <= best <= 1.25 * oracle

    def test_random_nominal_oracle_match(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            n = int(rng.integers(1, 5))
            A = rng.standard_normal((n, n))
            A *= rng.uniform(0.3, 0.85) / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
            m = StateSpaceModel(A, rng.standard_normal((n, 1)),
                                rng.standard_normal((1, n)), rng.standard_normal((1, 1)))
            plant = nominal_plant(m)
            hinf = analyze(plant, K0, None, PerformanceObjective("hinf")).gamma
            e2p = analyze(plant, K0, None, PerformanceObjective("e2p")).gamma
            assert hinf == pytest.approx(lti_gain_oracle(m, "hinf"), rel=1e-3)
            assert e2p == pytest.approx(lti_gain_oracle(m, "e2p"), rel=1e-3)


class TestUncertainAnalysis:
    def setup_method(self):
        self.plant = uncertain_scalar_plant()
        self.iqc = parametric_iqc(-0.5, 0.5, a=0.0, nu=2)
        self.K = K0_scalar()

    def test_hinf_upper_bounds_samples(self):
        res = analyze(self.plant, self.K, self.iqc, PerformanceObjective("hinf"))
        lb = lower_bound_estimate(self.plant, self.K, self.iqc,
                                  PerformanceObjective("hinf"), samples=50, seed=3)
        assert lb <= res.gamma + 1e-6
        assert res.gamma < 20.0

    def test_e2p_free_vs_restricted_ordering(self):
        free = analyze(self.plant, self.K, self.iqc, PerformanceObjective("e2p"),
                       AnalysisOptions(restrict_m1m2=False))
        best_restricted = np.inf
        for s in (0.1, 0.3, 0.5, 0.7, 0.9):
            r = analyze(self.plant, self.K, self.iqc, PerformanceObjective("e2p"),
                        AnalysisOptions(restrict_m1m2=True, sigma=s))
            best_restricted = min(best_restricted, r.gamma)
        assert best_restricted >= free.gamma - 1e-6

    def test_p2p_restricted_vs_free(self):
        free = analyze(self.plant, self.K, self.iqc, PerformanceObjective("p2p"),
                       AnalysisOptions(rho=0.95, restrict_m1m2=False))
        rest = analyze(self.plant, self.K, self.iqc, PerformanceObjective("p2p"),
                       AnalysisOptions(rho=0.95, restrict_m1m2=True, sigma=0.6))
        assert rest.gamma >= free.gamma - 1e-6

    def test_soundness_recheck(self):
        res = analyze(self.plant, self.K, self.iqc, PerformanceObjective("hinf"))
        assert res.max_violation < 1e-7

    def test_rho_decay_evidence(self):
        # an l2-rho certificate implies simulated decay at rate <= rho + margin
        rho = 0.97
        res = analyze(self.plant, self.K, self.iqc, PerformanceObjective("p2p"),
                      AnalysisOptions(rho=rho, restrict_m1m2=True, sigma=0.95))
        rng = np.random.default_rng(5)
        for _ in range(5):
            d = float(rng.uniform(-0.5, 0.5))
            out = simulate(self.plant, self.K, np.array([[d]]),
                           Signal.zeros(200, 1), x0=[1.0])
            x = np.abs(out["x"].samples[:, 0]) + 1e-300
            k0, k1 = 20, 199
            rate = (x[k1] / x[k0]) ** (1.0 / (k1 - k0))
            assert rate <= rho + 0.02


def K0_scalar():
    return Controller.zero(1, 1)


class TestDynamicUncertain:
    def test_dynamic_block_analysis(self):
        plant = uncertain_scalar_plant(delta_gain=0.5)
        iqc = dynamic_iqc(0.4, a=0.25, nu=1)
        res = analyze(plant, K0_scalar(), iqc, PerformanceObjective("hinf"))
        lb = lower_bound_estimate(plant, K0_scalar(), iqc,
                                  PerformanceObjective("hinf"), samples=40, seed=1)
        assert lb <= res.gamma + 1e-6


class TestCommonAnalysis:
    def test_single_objective_matches_analyze(self):
        plant = uncertain_scalar_plant()
        iqc = parametric_iqc(-0.5, 0.5, a=0.0, nu=2)
        obj = PerformanceObjective("hinf")
        single = analyze(plant, K0_scalar(), iqc, obj,
                         AnalysisOptions(restrict_m1m2=True))
        common = common_analysis(plant, K0_scalar(), iqc, [obj])
        assert common[0].gamma == pytest.approx(single.gamma, rel=1e-5)

    def test_duplicate_channels_equal(self):
        # two identical copies of the same channel get equal certified gains
        model = StateSpaceModel([[0.5]], [[0.2, 1.0, 0.0]],
                                [[1.0], [1.0], [1.0], [1.0]], np.zeros((4, 3)))
        plant = PartitionedPlant(
            model,
            {"p": (0, 1), "w": (1, 2), "u": (2, 3)},
            {"q": (0, 1), "z1": (1, 2), "z2": (2, 3), "y": (3, 4)},
        )
        iqc = parametric_iqc(-0.3, 0.3, a=0.0, nu=1)
        objs = [PerformanceObjective("e2p", channel="z1"),
                PerformanceObjective("e2p", channel="z2")]
        res = common_analysis(plant, K0_scalar(), iqc, objs)
        assert res[0].gamma == pytest.approx(res[1].gamma, rel=1e-6)

    def test_common_at_least_individual(self):
        model = StateSpaceModel([[0.5, 0.1], [0.0, 0.3]],
                                np.array([[0.3, 1.0, 0.5, 0.0], [0.1, 0.2, 1.0, 0.0]]),
                                np.array([[1.0, 0.0], [0.2, 1.0], [1.0, 1.0], [1.0, 0.0]]),
                                np.zeros((4, 4)))
        plant = PartitionedPlant(
            model,
            {"p": (0, 1), "w": (1, 3), "u": (3, 4)},
            {"q": (0, 1), "z1": (1, 2), "z2": (2, 3), "y": (3, 4)},
        )
        iqc = parametric_iqc(-0.4, 0.4, a=0.1, nu=1)
        objs = [PerformanceObjective("hinf", channel="z1"),
                PerformanceObjective("e2p", channel="z2")]
        com = common_analysis(plant, K0_scalar(), iqc, objs)
        total_common = sum(r.gamma for r in com)
        total_indiv = sum(
            analyze(plant, K0_scalar(), iqc, o).gamma for o in objs)
        assert total_common >= total_indiv - 1e-6


class TestLowerBound:
    def test_zero_uncertainty_equals_oracle(self):
        model = StateSpaceModel([[0.5]], [[1.0]], [[1.0]], [[0.0]])
        plant = nominal_plant(model)
        lb = lower_bound_estimate(plant, K0, None, PerformanceObjective("hinf"))
        assert lb == pytest.approx(2.0, rel=1e-6)

    def test_unstable_sample_reports_infinity(self):
        # uncertainty large enough to destabilize: delta * 1.0 feedback on A=0.95
        model = StateSpaceModel([[0.95]], [[1.0, 1.0, 0.0]],
                                [[1.0], [1.0], [1.0]], np.zeros((3, 3)))
        plant = PartitionedPlant(
            model,
            {"p": (0, 1), "w": (1, 2), "u": (2, 3)},
            {"q": (0, 1), "z": (1, 2), "y": (2, 3)},
        )
        iqc = parametric_iqc(-0.5, 0.5, a=0.0, nu=1)
        lb = lower_bound_estimate(plant, K0_scalar(), iqc, PerformanceObjective("hinf"),
                                  samples=10, seed=0)
        assert lb == np.inf
