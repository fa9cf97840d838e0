"""Benchmark problems used by the test suite and as CLI demos.

Two uncertain plants: a small two-parameter academic benchmark and a
flexible-shaft servo with an uncertain load inertia plus multiplicative
input uncertainty, discretized from its continuous dynamics and wrapped
with loop-shaping weights on the disturbance inputs.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .analysis import PerformanceObjective
from .iqc import IqcSpec, dynamic_iqc, parametric_iqc, stack_iqcs
from .statespace import PartitionedPlant, StateSpaceModel

__all__ = [
    "two_parameter_benchmark",
    "servo_benchmark",
    "servo_physical_plant",
]


def two_parameter_benchmark():
    """Two-state plant with two interval parameters on its uncertainty channel.

    Returns ``(plant, iqc, objectives_by_kind)`` where the uncertainty is
    ``diag(d1, d2)`` with ``d1 in [-0.1, 0.5]`` and ``d2 in [-0.3, 0.6]``,
    described by two stacked parametric constraints with basis pole -0.25
    and order 4.
    """
    M = np.array([
        [0.6, 0.2, 0.2, 0.2, 3.0, 2.0, 1.0, 0.0],
        [-0.1, -0.3, 0.3, -0.2, 3.0, 1.0, 2.0, 0.2],
        [0.2, -0.3, 0.4, 0.3, 3.0, 1.0, 0.0, 0.0],
        [0.8, 0.5, -0.6, 0.1, 2.0, 7.0, 0.0, 0.1],
        [2.0, 1.0, 1.0, 2.0, 1.0, -2.0, 4.0, 0.0],
        [2.0, 3.0, -1.0, 4.0, -4.0, 3.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.0, 0.0],
    ])
    A = M[:2, :2]
    B = M[:2, 2:]
    C = M[2:, :2]
    D = M[2:, 2:]
    model = StateSpaceModel(A, B, C, D)
    plant = PartitionedPlant(
        model,
        {"p": (0, 2), "w": (2, 4), "u": (4, 6)},
        {"q": (0, 2), "z": (2, 4), "y": (4, 5)},
    )
    iqc = stack_iqcs([
        parametric_iqc(-0.1, 0.5, a=-0.25, nu=4),
        parametric_iqc(-0.3, 0.6, a=-0.25, nu=4),
    ])
    objectives = {
        "hinf": PerformanceObjective("hinf"),
        "e2p": PerformanceObjective("e2p"),
        "p2p": PerformanceObjective("p2p"),
    }
    return plant, iqc, objectives


def _servo_continuous():
    """Continuous-time servo matrices split into nominal and inertia parts."""
    inv_jl = 4.0 / 30.0  # nominal 1/J_L for J_L in [5, 15]
    Ac_delta = np.array([
        [0.0, 0.0, 0.0, 0.0],
        [-1280.2, -25.0, 64.01, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
    ])
    Ac0 = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [128.02, 0.0, -6.4010, -10.2],
    ]) + inv_jl * Ac_delta
    Bc = np.array([[0.0], [0.0], [0.0], [220.0]])
    return Ac0, Ac_delta, Bc


def _discretize_servo(Ts: float = 0.1):
    """Sampled servo with the first-order inertia sensitivity blocks.

    The inertia enters linearly in continuous time; the matching discrete
    blocks are the directional derivative of the matrix exponential.
    """
    Ac0, Ac_delta, Bc = _servo_continuous()
    M0 = np.block([[Ts * Ac0, Ts * Bc], [np.zeros((1, 5))]])
    E = np.block([[Ts * Ac_delta, np.zeros((4, 1))], [np.zeros((1, 5))]])
    expM, dexp = sla.expm_frechet(M0, E)
    A = expM[:4, :4]
    Bu = expM[:4, 4:]
    Cq1 = dexp[:4, :4]
    Dq1u = dexp[:4, 4:]
    return A, Bu, Cq1, Dq1u


def _weight_w1():
    # 1.1178 (z - 0.9659)(z - 0.6916) / ((z - 0.9998)(z - 0.8588))
    k = 1.1178
    num = np.polymul([1.0, -0.9659], [1.0, -0.6916])
    den = np.polymul([1.0, -0.9998], [1.0, -0.8588])
    return _siso_from_tf(k * num, den)


def _weight_w2():
    # 66.661 (z - 0.9775) / (z + 0.3903)
    return _siso_from_tf(66.661 * np.array([1.0, -0.9775]), np.array([1.0, 0.3903]))


def _siso_from_tf(num, den):
    """Controllable-canonical biproper SISO realization of num/den."""
    num = np.atleast_1d(np.asarray(num, float))
    den = np.atleast_1d(np.asarray(den, float))
    num = num / den[0]
    den = den / den[0]
    n = den.size - 1
    if num.size < den.size:
        num = np.concatenate([np.zeros(den.size - num.size), num])
    d = num[0]
    rem = num[1:] - d * den[1:]
    A = np.zeros((n, n))
    A[0, :] = -den[1:]
    A[1:, :n - 1] += np.eye(n - 1)
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    C = rem.reshape(1, n)
    return A, B, C, np.array([[d]])


def servo_physical_plant() -> PartitionedPlant:
    """Unweighted servo loop for time-domain simulation.

    Inputs (p (5), w1 reference, w2 noise, u); outputs (q (5), z1 tracking
    error, z2 input, z3 torque, y1 reference, y2 measured angle).
    """
    A, Bu, Cq1, Dq1u = _discretize_servo()
    n = 4
    torque = np.array([[16.3, 0.0, -0.815, 0.0]])
    e1 = np.zeros((1, 4))
    e1[0, 0] = 1.0
    blocks_B = {
        "p": np.hstack([np.eye(4), Bu]),
        "w1": np.zeros((n, 1)),
        "w2": np.zeros((n, 1)),
        "u": Bu,
    }
    blocks_C = {
        "q": np.vstack([Cq1, np.zeros((1, n))]),
        "z1": e1,
        "z2": np.zeros((1, n)),
        "z3": torque,
        "y": np.vstack([np.zeros((1, n)), e1]),
    }
    blocks_D = {
        ("q", "p"): np.vstack([np.hstack([np.zeros((4, 4)), Dq1u]),
                               np.zeros((1, 5))]),
        ("q", "u"): np.vstack([Dq1u, np.ones((1, 1))]),
        ("z1", "w1"): np.array([[-1.0]]),
        ("z2", "u"): np.array([[1.0]]),
        ("y", "w1"): np.array([[1.0], [0.0]]),
        ("y", "w2"): np.array([[0.0], [1.0]]),
    }
    return PartitionedPlant.from_blocks(A, blocks_B, blocks_C, blocks_D)


def servo_benchmark():
    """Weighted servo synthesis problem with mixed objectives.

    Returns ``(plant, iqc, objectives)``: the plant appends the
    disturbance weights to the physical loop (7 states), the uncertainty
    stacks a 4-channel repeated inertia parameter (pole 0.5, order 2)
    with the scalar dynamic input uncertainty of gain 0.1, and the
    objectives minimize the energy-gain of the tracking error plus the
    peak gains of the input and torque channels.
    """
    phys = servo_physical_plant()
    A1, B1, C1, D1 = _weight_w1()
    A2, B2, C2, D2 = _weight_w2()
    n, n1, n2 = 4, A1.shape[0], A2.shape[0]
    A = sla.block_diag(phys.model.A, A1, A2)
    # weight states are driven by the raw disturbances
    nw = n + n1 + n2

    def lift_B(name):
        return np.vstack([phys.B(name), np.zeros((n1 + n2, phys.in_dim(name)))])

    blocks_B = {"p": lift_B("p")}
    blocks_B["w"] = np.vstack([
        np.hstack([phys.B("w1") @ D1, phys.B("w2") @ D2]),
        np.hstack([B1, np.zeros((n1, 1))]),
        np.hstack([np.zeros((n2, 1)), B2]),
    ])
    blocks_B["u"] = lift_B("u")
    w_cols = {"w1": (np.hstack([C1, np.zeros((1, n2))]), D1, 0),
              "w2": (np.hstack([np.zeros((1, n1)), C2]), D2, 1)}

    def lift_C(name):
        rows = phys.out_dim(name)
        C = np.hstack([phys.C(name), np.zeros((rows, n1 + n2))])
        for wn, (Cw, Dw, col) in w_cols.items():
            Dyw = phys.D(name, wn)
            C[:, n:] += Dyw @ Cw
        return C

    def D_w(name):
        rows = phys.out_dim(name)
        out = np.zeros((rows, 2))
        for wn, (Cw, Dw, col) in w_cols.items():
            out[:, col:col + 1] = phys.D(name, wn) @ Dw
        return out

    blocks_C = {}
    blocks_D = {}
    for name in ("q", "z1", "z2", "z3", "y"):
        blocks_C[name] = lift_C(name)
        blocks_D[(name, "p")] = phys.D(name, "p")
        blocks_D[(name, "u")] = phys.D(name, "u")
        blocks_D[(name, "w")] = D_w(name)
    plant = PartitionedPlant.from_blocks(A, blocks_B, blocks_C, blocks_D)
    delta_bar = 2.0 / 30.0
    iqc = stack_iqcs([
        parametric_iqc(-delta_bar, delta_bar, a=0.5, nu=2, n_channels=4),
        dynamic_iqc(0.1, a=0.5, nu=2),
    ])
    objectives = [
        PerformanceObjective("hinf", channel="z1", weight=1.0),
        PerformanceObjective("e2p", channel="z2", weight=1.0),
        PerformanceObjective("e2p", channel="z3", weight=1.0),
    ]
    return plant, iqc, objectives
