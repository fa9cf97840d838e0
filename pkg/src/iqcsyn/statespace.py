"""Discrete-time state-space algebra.

Value-semantic models, channel-partitioned plants, feedback
interconnections, the exponential loop transformation, filter
augmentation, minimal realizations, time-domain simulation, and
brute-force LTI gain oracles used as independent test references.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DimensionError,
    InstabilityError,
    WellPosednessError,
)

__all__ = [
    "StateSpaceModel",
    "PartitionedPlant",
    "Controller",
    "Signal",
    "lft",
    "loop_transform",
    "close_loop",
    "augment",
    "minreal",
    "lti_gain_oracle",
    "simulate",
    "unit_circle_grid",
    "freqresp",
]

TOL_SPEC = 1e-8


def _as_matrix(M, rows=None, cols=None) -> np.ndarray:
    """Coerce to a read-only 2-D float array, with optional fixed shape."""
    A = np.atleast_2d(np.asarray(M, dtype=float))
    if A.size == 0 and rows is not None and cols is not None:
        A = A.reshape(rows, cols) if rows * cols == 0 else A
    if rows is not None and A.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got shape {A.shape}")
    if cols is not None and A.shape[1] != cols:
        raise DimensionError(f"expected {cols} columns, got shape {A.shape}")
    A = A.copy()
    A.flags.writeable = False
    return A


@dataclass(frozen=True)
class StateSpaceModel:
    """Discrete-time LTI model ``x+ = A x + B u``, ``y = C x + D u``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A)
        n = A.shape[0]
        if A.shape[1] != n:
            raise DimensionError(f"A must be square, got {A.shape}")
        D = _as_matrix(self.D)
        r, m = D.shape
        B = _as_matrix(self.B, rows=n, cols=m)
        C = _as_matrix(self.C, rows=r, cols=n)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(self.A) if self.n_states else np.zeros(0, complex)

    def spectral_radius(self) -> float:
        p = self.poles()
        return float(np.max(np.abs(p))) if p.size else 0.0

    def is_schur(self, tol: float = TOL_SPEC) -> bool:
        """True iff every eigenvalue of A has modulus below ``1 - tol``."""
        return self.spectral_radius() < 1.0 - tol

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StateSpaceModel":
        return cls(data["A"], data["B"], data["C"], data["D"])

    @classmethod
    def static(cls, D) -> "StateSpaceModel":
        """A purely static (zero-state) model."""
        D = np.atleast_2d(np.asarray(D, float))
        r, m = D.shape
        return cls(np.zeros((0, 0)), np.zeros((0, m)), np.zeros((r, 0)), D)


def _check_groups(groups: dict, total: int, what: str) -> dict:
    """Validate that named half-open ranges partition ``range(total)``."""
    out = {}
    covered = []
    for name, rng in groups.items():
        lo, hi = int(rng[0]), int(rng[1])
        if lo > hi or lo < 0 or hi > total:
            raise DimensionError(f"{what} group {name!r} range {(lo, hi)} out of bounds")
        out[name] = (lo, hi)
        covered.extend(range(lo, hi))
    if sorted(covered) != list(range(total)) or len(set(covered)) != len(covered):
        raise DimensionError(
            f"{what} groups must partition 0..{total - 1} without overlap: {groups}")
    return out


@dataclass(frozen=True)
class PartitionedPlant:
    """State-space model with named, ordered input and output channel groups.

    ``input_groups`` and ``output_groups`` map a channel name to a
    half-open column/row range ``(lo, hi)``.  The conventional names are
    ``p`` (uncertainty input), ``w`` or ``w1``, ``w2``, ... (disturbance),
    ``u`` (control), ``q`` (uncertainty output), ``z``/``z1``, ... and
    ``y`` (measurement).  When a ``y``/``u`` pair is present the direct
    feedthrough from u to y must vanish.
    """

    model: StateSpaceModel
    input_groups: dict
    output_groups: dict

    def __post_init__(self):
        ig = _check_groups(dict(self.input_groups), self.model.n_inputs, "input")
        og = _check_groups(dict(self.output_groups), self.model.n_outputs, "output")
        object.__setattr__(self, "input_groups", ig)
        object.__setattr__(self, "output_groups", og)
        if "y" in og and "u" in ig:
            Dyu = self.D("y", "u")
            if Dyu.size and np.max(np.abs(Dyu)) > 0:
                raise DimensionError("feedthrough from u to y must be exactly zero")

    def in_slice(self, name: str) -> slice:
        lo, hi = self.input_groups[name]
        return slice(lo, hi)

    def out_slice(self, name: str) -> slice:
        lo, hi = self.output_groups[name]
        return slice(lo, hi)

    def in_dim(self, name: str) -> int:
        lo, hi = self.input_groups.get(name, (0, 0))
        return hi - lo

    def out_dim(self, name: str) -> int:
        lo, hi = self.output_groups.get(name, (0, 0))
        return hi - lo

    @property
    def n_states(self) -> int:
        return self.model.n_states

    def B(self, name: str) -> np.ndarray:
        return self.model.B[:, self.in_slice(name)]

    def C(self, name: str) -> np.ndarray:
        return self.model.C[self.out_slice(name), :]

    def D(self, out: str, inp: str) -> np.ndarray:
        return self.model.D[self.out_slice(out), self.in_slice(inp)]

    def subsystem(self, outputs: Sequence[str], inputs: Sequence[str]) -> StateSpaceModel:
        """Model restricted to the named output rows and input columns."""
        rows = np.concatenate([np.arange(*self.output_groups[o]) for o in outputs]) if outputs else np.zeros(0, int)
        cols = np.concatenate([np.arange(*self.input_groups[i]) for i in inputs]) if inputs else np.zeros(0, int)
        M = self.model
        return StateSpaceModel(M.A, M.B[:, cols], M.C[rows, :], M.D[np.ix_(rows, cols)])

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d["input_groups"] = {k: list(v) for k, v in self.input_groups.items()}
        d["output_groups"] = {k: list(v) for k, v in self.output_groups.items()}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PartitionedPlant":
        return cls(
            StateSpaceModel.from_dict(data),
            {k: tuple(v) for k, v in data["input_groups"].items()},
            {k: tuple(v) for k, v in data["output_groups"].items()},
        )

    @classmethod
    def from_blocks(cls, A, blocks_B: dict, blocks_C: dict, blocks_D: dict) -> "PartitionedPlant":
        """Assemble from per-channel blocks.

        ``blocks_B[name]`` gives input columns, ``blocks_C[name]`` output
        rows and ``blocks_D[(out, inp)]`` feedthrough blocks (missing ones
        are zero).  Group order follows the dict insertion order.
        """
        A = np.atleast_2d(np.asarray(A, float))
        n = A.shape[0]
        ig, og = {}, {}
        col = 0
        Bs = []
        for name, Bi in blocks_B.items():
            Bi = np.asarray(Bi, float).reshape(n, -1)
            ig[name] = (col, col + Bi.shape[1])
            col += Bi.shape[1]
            Bs.append(Bi)
        row = 0
        Cs = []
        for name, Ci in blocks_C.items():
            Ci = np.asarray(Ci, float).reshape(-1, n)
            og[name] = (row, row + Ci.shape[0])
            row += Ci.shape[0]
            Cs.append(Ci)
        B = np.hstack(Bs) if Bs else np.zeros((n, 0))
        C = np.vstack(Cs) if Cs else np.zeros((0, n))
        D = np.zeros((row, col))
        for (o, i), Dij in blocks_D.items():
            D[og[o][0]:og[o][1], ig[i][0]:ig[i][1]] = np.asarray(Dij, float).reshape(
                og[o][1] - og[o][0], ig[i][1] - ig[i][0])
        return cls(StateSpaceModel(A, B, C, D), ig, og)


@dataclass(frozen=True)
class Controller:
    """Output-feedback controller ``k+ = Ak k + Bk y``, ``u = Ck k + Dk y``."""

    Ak: np.ndarray
    Bk: np.ndarray
    Ck: np.ndarray
    Dk: np.ndarray

    def __post_init__(self):
        Ak = _as_matrix(self.Ak)
        nk = Ak.shape[0]
        if Ak.shape[1] != nk:
            raise DimensionError(f"Ak must be square, got {Ak.shape}")
        Dk = _as_matrix(self.Dk)
        nu, ny = Dk.shape
        object.__setattr__(self, "Ak", Ak)
        object.__setattr__(self, "Bk", _as_matrix(self.Bk, rows=nk, cols=ny))
        object.__setattr__(self, "Ck", _as_matrix(self.Ck, rows=nu, cols=nk))
        object.__setattr__(self, "Dk", Dk)

    @property
    def order(self) -> int:
        return self.Ak.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.Bk.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.Ck.shape[0]

    def as_model(self) -> StateSpaceModel:
        return StateSpaceModel(self.Ak, self.Bk, self.Ck, self.Dk)

    def to_dict(self, **metadata) -> dict:
        d = {"A": self.Ak.tolist(), "B": self.Bk.tolist(),
             "C": self.Ck.tolist(), "D": self.Dk.tolist()}
        if metadata:
            d["metadata"] = metadata
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "Controller":
        return cls(data["A"], data["B"], data["C"], data["D"])

    @classmethod
    def zero(cls, n_u: int, n_y: int, order: int = 0) -> "Controller":
        return cls(np.zeros((order, order)), np.zeros((order, n_y)),
                   np.zeros((n_u, order)), np.zeros((n_u, n_y)))


@dataclass(frozen=True)
class Signal:
    """Finite vector-valued sequence with uniform dimension."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, float)
        if s.ndim == 1:
            s = s.reshape(-1, 1)
        if s.ndim != 2:
            raise DimensionError("signal samples must form a T x n array")
        s = s.copy()
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def l2_norm(self, rho: float = 1.0) -> float:
        """The l2 norm, or the rho-weighted norm ``sqrt(sum rho^-2k |w_k|^2)``."""
        w = self.samples
        if rho == 1.0:
            return float(np.sqrt(np.sum(w * w)))
        k = np.arange(len(self))
        return float(np.sqrt(np.sum((rho ** (-2.0 * k)) * np.sum(w * w, axis=1))))

    def peak_norm(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.samples, axis=1)))

    def scaled(self, rho: float) -> "Signal":
        """Pointwise exponential scaling ``w_k -> rho^k w_k``."""
        k = np.arange(len(self))
        return Signal(self.samples * (rho ** k)[:, None])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k"] + [f"v{i + 1}" for i in range(self.dim)])
            for k, row in enumerate(self.samples):
                writer.writerow([k] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "Signal":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        data = [[float(v) for v in row[1:]] for row in rows[1:]]
        return cls(np.asarray(data, float))

    @classmethod
    def zeros(cls, T: int, dim: int) -> "Signal":
        return cls(np.zeros((T, dim)))


def save_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj.to_dict() if hasattr(obj, "to_dict") else obj, fh, indent=2)


# ---------------------------------------------------------------------------
# frequency response helpers


def unit_circle_grid(n: int = 512, theta_min: float = 1e-4) -> np.ndarray:
    """Angles in [0, pi] clustered logarithmically towards zero frequency."""
    if n < 4:
        return np.linspace(0.0, np.pi, max(n, 2))
    body = np.geomspace(theta_min, np.pi, n - 1)
    return np.concatenate(([0.0], body))


def freqresp(model: StateSpaceModel, theta: np.ndarray) -> np.ndarray:
    """Frequency response ``G(e^{i theta})`` for each grid angle.

    Returns an array of shape ``(len(theta), n_outputs, n_inputs)``.
    """
    theta = np.atleast_1d(np.asarray(theta, float))
    A, B, C, D = model.A, model.B, model.C, model.D
    n = model.n_states
    out = np.empty((theta.size, model.n_outputs, model.n_inputs), dtype=complex)
    if n == 0:
        out[:] = D
        return out
    eye = np.eye(n)
    for i, th in enumerate(theta):
        z = np.exp(1j * th)
        out[i] = C @ np.linalg.solve(z * eye - A, B) + D
    return out


# ---------------------------------------------------------------------------
# interconnections


def _close_channel(A, B1, B2, C1, C2, D11, D12, D21, D22, inner: StateSpaceModel,
                   tol_inv: float = 1e-12):
    """Close the (C2/D2x rows, B2/Dx2 cols) channel with ``inner``.

    The retained channel is 1.  Raises when the algebraic loop
    ``I - D22 Dk`` is singular within ``tol_inv``.
    """
    Ak, Bk, Ck, Dk = inner.A, inner.B, inner.C, inner.D
    m2 = D22.shape[1]
    loop = np.eye(m2) - Dk @ D22
    if m2:
        svals = np.linalg.svd(loop, compute_uv=False)
        if svals.size == 0 or svals[-1] <= tol_inv * max(1.0, svals[0]):
            raise WellPosednessError("feedback loop matrix I - Dk D22 is singular")
    R = np.linalg.inv(loop) if m2 else loop
    S = np.eye(D22.shape[0]) - D22 @ Dk
    S = np.linalg.inv(S) if S.size else S
    RDk = R @ Dk
    Acl = np.block([
        [A + B2 @ RDk @ C2, B2 @ R @ Ck],
        [Bk @ S @ C2, Ak + Bk @ S @ D22 @ Ck],
    ])
    Bcl = np.vstack([B1 + B2 @ RDk @ D21, Bk @ S @ D21])
    Ccl = np.hstack([C1 + D12 @ RDk @ C2, D12 @ R @ Ck])
    Dcl = D11 + D12 @ RDk @ D21
    return StateSpaceModel(Acl, Bcl, Ccl, Dcl)


def lft(outer: StateSpaceModel, inner: StateSpaceModel, side: str = "lower",
        n_keep_out: int | None = None, n_keep_in: int | None = None,
        tol_inv: float = 1e-12) -> StateSpaceModel:
    """Linear fractional transformation of two state-space models.

    For ``side="lower"`` the last ``n_outputs(inner.B)`` outputs and last
    ``n_inputs`` of ``outer`` are closed through ``inner`` (``G * K``);
    for ``side="upper"`` the first ones are closed (``inner * G``).
    ``n_keep_out``/``n_keep_in`` fix the retained channel dimensions,
    defaulting to whatever ``inner`` leaves open.

    Raises
    ------
    WellPosednessError
        If the feedthrough loop matrix is singular within ``tol_inv``.
    """
    r, m = outer.n_outputs, outer.n_inputs
    ny, nu = inner.B.shape[1], inner.C.shape[0]
    if n_keep_out is None:
        n_keep_out = r - ny
    if n_keep_in is None:
        n_keep_in = m - nu
    if n_keep_out < 0 or n_keep_in < 0:
        raise DimensionError("inner system has more channels than outer offers")
    A, B, C, D = outer.A, outer.B, outer.C, outer.D
    if side == "lower":
        s_out1, s_out2 = slice(0, n_keep_out), slice(n_keep_out, r)
        s_in1, s_in2 = slice(0, n_keep_in), slice(n_keep_in, m)
    elif side == "upper":
        s_out2, s_out1 = slice(0, r - n_keep_out), slice(r - n_keep_out, r)
        s_in2, s_in1 = slice(0, m - n_keep_in), slice(m - n_keep_in, m)
    else:
        raise ValueError(f"side must be 'lower' or 'upper', got {side!r}")
    return _close_channel(
        A, B[:, s_in1], B[:, s_in2], C[s_out1], C[s_out2],
        D[s_out1, s_in1], D[s_out1, s_in2], D[s_out2, s_in1], D[s_out2, s_in2],
        inner, tol_inv=tol_inv,
    )


def loop_transform(model: StateSpaceModel, rho: float) -> StateSpaceModel:
    """Exponentially weighted loop transformation.

    Scales the state-update rows by ``1/rho`` and leaves the output rows
    untouched, so the transformed system maps ``rho^-k``-scaled inputs to
    ``rho^-k``-scaled outputs of the original one.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    if rho == 1.0:
        return model
    return StateSpaceModel(model.A / rho, model.B / rho, model.C, model.D)


def close_loop(G: PartitionedPlant, K: Controller, rho: float = 1.0) -> PartitionedPlant:
    """Feedback interconnection of the rho-transformed plant and controller.

    The control channel ``u <- y`` is closed; state order is (plant,
    controller).  Output rows and feedthrough blocks do not depend on
    ``rho``.  Disturbance and performance groups other than p/q are kept
    with their original names.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    if K.n_inputs != G.out_dim("y") or K.n_outputs != G.in_dim("u"):
        raise DimensionError(
            f"controller dims {K.n_outputs}x{K.n_inputs} do not match plant "
            f"u/y dims {G.in_dim('u')}x{G.out_dim('y')}")
    ri = 1.0 / rho
    A = ri * G.model.A
    Cy = G.C("y")
    Bu = ri * G.B("u")
    Ak, Bk, Ck, Dk = K.Ak * ri, K.Bk * ri, K.Ck, K.Dk
    in_names = [n for n in G.input_groups if n != "u"]
    out_names = [n for n in G.output_groups if n != "y"]
    Acl = np.block([[A + Bu @ Dk @ Cy, Bu @ Ck], [Bk @ Cy, Ak]])
    nk = K.order
    blocks_B = {}
    for name in in_names:
        Bi = ri * G.B(name)
        Dyi = G.D("y", name)
        blocks_B[name] = np.vstack([Bi + Bu @ Dk @ Dyi, Bk @ Dyi])
    blocks_C = {}
    blocks_D = {}
    for oname in out_names:
        Cj = G.C(oname)
        Dju = G.D(oname, "u")
        blocks_C[oname] = np.hstack([Cj + Dju @ Dk @ Cy, Dju @ Ck])
        for iname in in_names:
            blocks_D[(oname, iname)] = G.D(oname, iname) + Dju @ Dk @ G.D("y", iname)
    return PartitionedPlant.from_blocks(Acl, blocks_B, blocks_C, blocks_D)


def augment(GK: PartitionedPlant, psi) -> PartitionedPlant:
    """Stack an IQC filter on the uncertainty channel of a closed loop.

    ``psi`` provides matrices ``A_psi, B_psi_q, B_psi_p, C_psi, D_psi_q,
    D_psi_p``; the result maps (p, w...) to (s, z...) with state order
    (filter, loop).  Rows of s and z do not depend on the loop transform.
    """
    Apsi, Bq, Bp = psi.A_psi, psi.B_psi_q, psi.B_psi_p
    Cpsi, Dq, Dp = psi.C_psi, psi.D_psi_q, psi.D_psi_p
    if Bq.shape[1] != GK.out_dim("q") or Bp.shape[1] != GK.in_dim("p"):
        raise DimensionError("filter q/p dimensions do not match the loop")
    npsi = Apsi.shape[0]
    n = GK.n_states
    Cq = GK.C("q")
    A = np.block([[Apsi, Bq @ Cq], [np.zeros((n, npsi)), GK.model.A]])
    in_names = [nm for nm in GK.input_groups]
    blocks_B = {}
    for name in in_names:
        Dqi = GK.D("q", name)
        extra = Bp if name == "p" else np.zeros((npsi, GK.in_dim(name)))
        blocks_B[name] = np.vstack([extra + Bq @ Dqi, GK.B(name)])
    blocks_C = {"s": np.hstack([Cpsi, Dq @ Cq])}
    blocks_D = {}
    for name in in_names:
        extra = Dp if name == "p" else np.zeros((Cpsi.shape[0], GK.in_dim(name)))
        blocks_D[("s", name)] = extra + Dq @ GK.D("q", name)
    for oname in GK.output_groups:
        if oname == "q":
            continue
        blocks_C[oname] = np.hstack([np.zeros((GK.out_dim(oname), npsi)), GK.C(oname)])
        for iname in in_names:
            blocks_D[(oname, iname)] = GK.D(oname, iname)
    return PartitionedPlant.from_blocks(A, blocks_B, blocks_C, blocks_D)


# ---------------------------------------------------------------------------
# minimal realization


def _reachable_basis(A: np.ndarray, B: np.ndarray, rtol: float) -> np.ndarray:
    """Orthonormal basis of the controllable subspace of (A, B).

    Singular vectors of the block-normalized controllability matrix;
    per-block scaling leaves each block's column space untouched while
    preventing overflow or swamping for large or unstable A.
    """
    n = A.shape[0]
    if n == 0 or B.shape[1] == 0 or not np.any(B):
        return np.zeros((n, 0))
    blocks = []
    X = B
    for _ in range(n):
        nrm = np.linalg.norm(X)
        if nrm == 0 or not np.isfinite(nrm):
            break
        blocks.append(X / nrm)
        X = A @ X
    K = np.hstack(blocks)
    U, s, _ = np.linalg.svd(K, full_matrices=False)
    keep = s > rtol * s[0]
    return U[:, keep]


def minreal(model: StateSpaceModel, tol: float = 1e-9, reduce: str = "both"):
    """Minimal realization via orthogonal controllability/observability cuts.

    Parameters
    ----------
    model : StateSpaceModel
    tol : float
        Relative rank tolerance for the subspace extraction.
    reduce : {"both", "controllable", "observable"}
        Which redundancy to remove.

    Returns
    -------
    (StateSpaceModel, ndarray or None)
        The reduced model and, for observability-only reduction, the
        full-row-rank map ``V`` with ``V A = A_min V``, ``V B = B_min``
        and ``C = C_min V``.  ``None`` otherwise.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    A, B, C, D = model.A, model.B, model.C, model.D
    if reduce in ("both", "controllable"):
        V = _reachable_basis(A, B, tol)
        A, B, C = V.T @ A @ V, V.T @ B, C @ V
    Vmap = None
    if reduce in ("both", "observable"):
        W = _reachable_basis(A.T, C.T, tol)
        A, B, C = W.T @ A @ W, W.T @ B, C @ W
        Vmap = W.T
    out = StateSpaceModel(A, B, C, D)
    if reduce == "observable":
        return out, Vmap
    return out, None


# ---------------------------------------------------------------------------
# gain oracles


def _impulse_terms(model: StateSpaceModel, rel_tol: float = 1e-10, max_terms: int = 200_000):
    """Impulse-response matrices h_0, h_1, ... truncated by a geometric tail bound.

    Yields the terms; stops once the estimated tail is below ``rel_tol``
    times the accumulated absolute-sum, using the spectral radius for the
    decay estimate.
    """
    A, B, C, D = model.A, model.B, model.C, model.D
    yield D
    if model.n_states == 0:
        return
    sr = model.spectral_radius()
    if sr >= 1.0:
        raise InstabilityError("impulse-response oracle requires a Schur-stable model")
    r = min(0.5 * (1.0 + sr), 0.999999)
    X = B.copy()
    acc = max(float(np.linalg.norm(D)), 1e-300)
    for k in range(1, max_terms):
        H = C @ X
        yield H
        nh = float(np.linalg.norm(H))
        acc += nh
        # after a burn-in of n steps, ||h_{k+j}|| <~ ||h_k|| r^j
        if k > model.n_states and nh / (1.0 - r) < rel_tol * acc:
            return
        X = A @ X


def lti_gain_oracle(model: StateSpaceModel, kind: str, grid: int = 512,
                    rel_tol: float = 1e-8, refine: int = 40,
                    directions: int = 32, seed: int = 0) -> float:
    """Brute-force gain computation used as an independent test reference.

    ``kind="hinf"`` evaluates the largest singular value on a dense
    unit-circle grid and refines around the peaks.  ``kind="e2p"``
    returns ``sqrt(lambda_max(sum h_k h_k^T))`` of the truncated impulse
    response (exact for any input count).  ``kind="p2p"`` returns
    ``sum_k ||h_k||`` for single-output models; with several outputs a
    sampled-direction maximization gives a certified lower bound.

    Raises
    ------
    InstabilityError
        If the model is not Schur stable.
    """
    if not model.is_schur():
        raise InstabilityError("gain oracle requires a Schur-stable model")
    if kind == "hinf":
        theta = unit_circle_grid(grid)
        resp = freqresp(model, theta)
        sig = np.array([np.linalg.svd(resp[i], compute_uv=False)[0] if resp[i].size else 0.0
                        for i in range(theta.size)])
        if sig.size == 0:
            return 0.0
        best = float(np.max(sig))
        order = np.argsort(sig)[::-1][:3]
        for idx in order:
            lo = theta[max(idx - 1, 0)]
            hi = theta[min(idx + 1, theta.size - 1)]
            a, b = lo, hi
            gr = 0.5 * (np.sqrt(5.0) - 1.0)
            c, d = b - gr * (b - a), a + gr * (b - a)
            fc = np.linalg.svd(freqresp(model, [c])[0], compute_uv=False)[0]
            fd = np.linalg.svd(freqresp(model, [d])[0], compute_uv=False)[0]
            for _ in range(refine):
                if fc > fd:
                    b, d, fd = d, c, fc
                    c = b - gr * (b - a)
                    fc = np.linalg.svd(freqresp(model, [c])[0], compute_uv=False)[0]
                else:
                    a, c, fc = c, d, fd
                    d = a + gr * (b - a)
                    fd = np.linalg.svd(freqresp(model, [d])[0], compute_uv=False)[0]
                best = max(best, float(fc), float(fd))
        return best
    if kind == "e2p":
        Gram = None
        for H in _impulse_terms(model, rel_tol=rel_tol):
            Gram = H @ H.T if Gram is None else Gram + H @ H.T
        if Gram is None or Gram.size == 0:
            return 0.0
        return float(np.sqrt(max(np.max(np.linalg.eigvalsh(Gram)), 0.0)))
    if kind == "p2p":
        terms = list(_impulse_terms(model, rel_tol=rel_tol))
        r = model.n_outputs
        if r == 0:
            return 0.0
        if r == 1:
            return float(sum(np.linalg.norm(H) for H in terms))
        rng = np.random.default_rng(seed)
        dirs = np.vstack([np.eye(r), rng.standard_normal((directions, r))])
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        vals = [sum(float(np.linalg.norm(u @ H)) for H in terms) for u in dirs]
        return float(max(vals))
    raise ValueError(f"unknown gain kind {kind!r}")


# ---------------------------------------------------------------------------
# simulation


def _delta_realization(delta):
    """Normalize an uncertainty description to (A, B, C, D) or None (callable)."""
    if isinstance(delta, StateSpaceModel):
        return delta.A, delta.B, delta.C, delta.D
    if isinstance(delta, tuple) and len(delta) == 4:
        return tuple(np.atleast_2d(np.asarray(M, float)) for M in delta)
    if callable(delta):
        return None
    Dm = np.atleast_2d(np.asarray(delta, float))
    return (np.zeros((0, 0)), np.zeros((0, Dm.shape[1])),
            np.zeros((Dm.shape[0], 0)), Dm)


def simulate(G: PartitionedPlant, K: Controller, delta, w: Signal, T: int | None = None,
             x0=None, k0=None, w_names: Sequence[str] | None = None):
    """Simulate the uncertain feedback loop.

    Parameters
    ----------
    G : PartitionedPlant
        Open-loop plant with p/q, disturbance, and u/y channels.
    K : Controller
    delta : None, matrix, StateSpaceModel, tuple, or callable
        Uncertainty realization mapping q to p.  A callable must be
        strictly causal: it receives ``(k, q_history)`` with samples up
        to ``k - 1`` and returns ``p_k``.
    w : Signal
        Disturbance samples; padded with zeros up to ``T`` steps.
    T : int, optional
        Number of steps (defaults to ``len(w)``).
    w_names : sequence of str, optional
        Input groups w feeds, in order (default: every non-p, non-u group).

    Returns
    -------
    dict of Signal
        Keys ``x, kappa, q, p, z, y, u`` with the z rows stacked over all
        non-q, non-y output groups in plant order.

    Raises
    ------
    WellPosednessError
        If the static algebraic loop through the uncertainty is singular.
    """
    if T is None:
        T = len(w)
    if w_names is None:
        w_names = [n for n in G.input_groups if n not in ("p", "u")]
    z_names = [n for n in G.output_groups if n not in ("q", "y")]
    n = G.n_states
    nk = K.order
    n_p, n_q = G.in_dim("p"), G.out_dim("q")
    Bw = np.hstack([G.B(nm) for nm in w_names]) if w_names else np.zeros((n, 0))
    nw = Bw.shape[1]
    if w.dim != nw:
        raise DimensionError(f"disturbance dimension {w.dim} does not match plant ({nw})")
    Dyw = np.hstack([G.D("y", nm) for nm in w_names]) if w_names else np.zeros((G.out_dim("y"), 0))
    Dqw = np.hstack([G.D("q", nm) for nm in w_names]) if w_names else np.zeros((n_q, 0))
    Cy, Cq = G.C("y"), G.C("q")
    Dyp, Dqp = G.D("y", "p"), G.D("q", "p")
    Dqu = G.D("q", "u")
    Bp, Bu = G.B("p"), G.B("u")
    Cz = np.vstack([G.C(nm) for nm in z_names]) if z_names else np.zeros((0, n))
    Dzp = np.vstack([G.D(nm, "p") for nm in z_names]) if z_names else np.zeros((0, n_p))
    Dzw = np.vstack([np.hstack([G.D(zn, wn) for wn in w_names]) for zn in z_names]) \
        if z_names and w_names else np.zeros((Cz.shape[0], nw))
    Dzu = np.vstack([G.D(nm, "u") for nm in z_names]) if z_names else np.zeros((0, G.in_dim("u")))

    zero_delta = delta is None
    realization = None if zero_delta else _delta_realization(delta)
    callable_delta = (not zero_delta) and realization is None
    solve_loop = None
    if realization is not None:
        Ad, Bd, Cd, Dd = realization
        # closed-loop q feedthrough to p: q = ... + (Dqp + Dqu Dk Dyp) p
        Dqp_cl = Dqp + Dqu @ K.Dk @ Dyp
        loop = np.eye(n_p) - Dd @ Dqp_cl
        if n_p:
            s = np.linalg.svd(loop, compute_uv=False)
            if s[-1] <= 1e-12 * max(1.0, s[0]):
                raise WellPosednessError("algebraic loop through the uncertainty is singular")
        solve_loop = np.linalg.inv(loop) if n_p else loop
        xd = np.zeros(Ad.shape[0])

    x = np.zeros(n) if x0 is None else np.asarray(x0, float).reshape(n)
    kap = np.zeros(nk) if k0 is None else np.asarray(k0, float).reshape(nk)
    W = np.zeros((T, nw))
    W[:min(T, len(w))] = w.samples[:T]
    xs, ks, qs, ps, zs, ys, us = (np.zeros((T, d)) for d in
                                  (n, nk, n_q, n_p, Cz.shape[0], G.out_dim("y"), G.in_dim("u")))
    q_hist = np.zeros((T, n_q))
    for k in range(T):
        wk = W[k]
        if zero_delta:
            pk = np.zeros(n_p)
        elif callable_delta:
            pk = np.asarray(delta(k, q_hist[:k]), float).reshape(n_p)
        else:
            rhs = Cd @ xd + Dd @ (Cq @ x + Dqw @ wk + Dqu @ (K.Ck @ kap + K.Dk @ (Cy @ x + Dyw @ wk)))
            pk = solve_loop @ rhs if n_p else np.zeros(0)
        yk = Cy @ x + Dyp @ pk + Dyw @ wk
        uk = K.Ck @ kap + K.Dk @ yk
        qk = Cq @ x + Dqp @ pk + Dqw @ wk + Dqu @ uk
        zk = Cz @ x + Dzp @ pk + Dzw @ wk + Dzu @ uk
        xs[k], ks[k], qs[k], ps[k], zs[k], ys[k], us[k] = x, kap, qk, pk, zk, yk, uk
        q_hist[k] = qk
        x = G.model.A @ x + Bp @ pk + Bw @ wk + Bu @ uk
        kap = K.Ak @ kap + K.Bk @ yk
        if realization is not None and Ad.shape[0]:
            xd = Ad @ xd + Bd @ qk
    return {"x": Signal(xs), "kappa": Signal(ks), "q": Signal(qs), "p": Signal(ps),
            "z": Signal(zs), "y": Signal(ys), "u": Signal(us)}
