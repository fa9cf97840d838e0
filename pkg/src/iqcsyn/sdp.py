"""LMI modeling layer with pluggable conic-solver backends.

Symmetric/rectangular/scalar matrix variables, affine matrix
expressions built from ``L @ X @ R`` terms, positive-semidefinite and
equality constraints with explicit strictness margins, and a linear
objective.  Problems are canonicalized to the scaled-triangle conic
form shared by the clarabel and scs backends.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import BackendFailureError, DimensionError

__all__ = [
    "SdpProblem",
    "SdpSolution",
    "MatExpr",
    "VarHandle",
    "const_expr",
    "block_expr",
    "sym",
    "schur_embed",
    "solve_sdp",
    "write_sdpa",
]

DEFAULT_EPS_LMI = 1e-7

_FOLD_CACHE: dict = {}


def _fold_matrix(m: int) -> np.ndarray:
    """Map lower-triangle parameters of a symmetric m x m onto vec_F."""
    F = _FOLD_CACHE.get(m)
    if F is None:
        idx_i, idx_j = np.tril_indices(m)
        F = np.zeros((m * m, idx_i.size))
        for k, (i, j) in enumerate(zip(idx_i, idx_j)):
            F[i + j * m, k] += 1.0
            if i != j:
                F[j + i * m, k] += 1.0
        _FOLD_CACHE[m] = F
    return F


def _as2d(M):
    return np.atleast_2d(np.asarray(M, float))


@dataclass(frozen=True)
class VarHandle:
    """Registered decision variable; usable directly as a matrix expression."""

    name: str
    kind: str  # symmetric | rectangular | scalar
    shape: tuple
    offset: int

    __array_ufunc__ = None  # make ndarray defer to our reflected operators

    @property
    def n_params(self) -> int:
        r, c = self.shape
        if self.kind == "symmetric":
            return r * (r + 1) // 2
        return r * c

    def expr(self) -> "MatExpr":
        r, c = self.shape
        return MatExpr(self.shape, np.zeros(self.shape),
                       {self.name: [(np.eye(r), np.eye(c), False)]})

    # convenience operator forwarding
    def __add__(self, other):
        return self.expr() + other

    def __radd__(self, other):
        return self.expr().__radd__(other)

    def __sub__(self, other):
        return self.expr() - other

    def __rsub__(self, other):
        return self.expr().__rsub__(other)

    def __neg__(self):
        return -self.expr()

    def __mul__(self, a):
        return self.expr() * a

    def __rmul__(self, a):
        return self.expr() * a

    def __matmul__(self, other):
        return self.expr() @ other

    def __rmatmul__(self, other):
        return self.expr().__rmatmul__(other)

    @property
    def T(self):
        return self.expr().T


class MatExpr:
    """Affine matrix expression ``const + sum_i L_i @ X_i(^T) @ R_i``."""

    __slots__ = ("shape", "const", "terms")
    __array_ufunc__ = None  # make ndarray defer to our reflected operators

    def __init__(self, shape, const, terms=None):
        self.shape = tuple(shape)
        self.const = _as2d(const).reshape(self.shape) if np.size(const) else np.zeros(self.shape)
        self.terms = terms or {}

    @staticmethod
    def wrap(other, shape=None) -> "MatExpr":
        if isinstance(other, MatExpr):
            return other
        if isinstance(other, VarHandle):
            return other.expr()
        M = _as2d(other)
        if shape is not None and M.shape != tuple(shape):
            if M.size == 1:
                M = float(M) * np.eye(*shape)
            else:
                raise DimensionError(f"cannot broadcast {M.shape} to {shape}")
        return MatExpr(M.shape, M)

    def _merged(self, other, sign=1.0):
        other = MatExpr.wrap(other, self.shape)
        if other.shape != self.shape:
            raise DimensionError(f"shape mismatch {self.shape} vs {other.shape}")
        terms = {k: list(v) for k, v in self.terms.items()}
        for name, tl in other.terms.items():
            terms.setdefault(name, [])
            terms[name].extend((sign * L, R, t) for (L, R, t) in tl)
        return MatExpr(self.shape, self.const + sign * other.const, terms)

    def __add__(self, other):
        return self._merged(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._merged(other, -1.0)

    def __rsub__(self, other):
        return (-self)._merged(other, 1.0)

    def __neg__(self):
        return MatExpr(self.shape, -self.const,
                       {k: [(-L, R, t) for (L, R, t) in v] for k, v in self.terms.items()})

    def __mul__(self, a):
        a = float(a)
        return MatExpr(self.shape, a * self.const,
                       {k: [(a * L, R, t) for (L, R, t) in v] for k, v in self.terms.items()})

    __rmul__ = __mul__

    def __matmul__(self, M):
        if isinstance(M, (MatExpr, VarHandle)):
            raise TypeError("products of two variable expressions are not affine")
        M = _as2d(M)
        return MatExpr((self.shape[0], M.shape[1]), self.const @ M,
                       {k: [(L, R @ M, t) for (L, R, t) in v] for k, v in self.terms.items()})

    def __rmatmul__(self, M):
        M = _as2d(M)
        return MatExpr((M.shape[0], self.shape[1]), M @ self.const,
                       {k: [(M @ L, R, t) for (L, R, t) in v] for k, v in self.terms.items()})

    @property
    def T(self) -> "MatExpr":
        return MatExpr(self.shape[::-1], self.const.T,
                       {k: [(R.T, L.T, not t) for (L, R, t) in v] for k, v in self.terms.items()})

    def __getitem__(self, key) -> "MatExpr":
        """Row/column selection via slices or index arrays."""
        rows, cols = key if isinstance(key, tuple) else (key, slice(None))
        ridx = np.arange(self.shape[0])[rows]
        cidx = np.arange(self.shape[1])[cols]
        Er = np.zeros((ridx.size, self.shape[0]))
        Er[np.arange(ridx.size), ridx] = 1.0
        Ec = np.zeros((self.shape[1], cidx.size))
        Ec[cidx, np.arange(cidx.size)] = 1.0
        return Er @ self @ Ec

    def value(self, values: dict) -> np.ndarray:
        """Evaluate at a dict of variable values."""
        out = self.const.copy()
        for name, tl in self.terms.items():
            X = _as2d(values[name])
            for L, R, t in tl:
                out += L @ (X.T if t else X) @ R
        return out


def const_expr(M) -> MatExpr:
    return MatExpr.wrap(M)


def scalar_times(x, M) -> MatExpr:
    """Product of a scalar expression ``x`` and a constant matrix ``M``.

    A general matrix needs one rank-one term per column since terms are
    shaped as ``L @ x @ R`` with a 1x1 variable in the middle.
    """
    M = _as2d(M)
    x = MatExpr.wrap(x)
    if x.shape != (1, 1):
        raise DimensionError("scalar_times needs a scalar expression")
    out = MatExpr(M.shape, np.zeros(M.shape))
    for j in range(M.shape[1]):
        col = M[:, j:j + 1]
        if np.any(col):
            ej = np.zeros((1, M.shape[1]))
            ej[0, j] = 1.0
            out = out + col @ x @ ej
    return out


def sym(e) -> MatExpr:
    e = MatExpr.wrap(e)
    return 0.5 * (e + e.T)


def block_expr(rows) -> MatExpr:
    """Assemble a block matrix of expressions/constants (zeros allowed as 0)."""
    wrapped = []
    for row in rows:
        wrapped.append([x if isinstance(x, (MatExpr, VarHandle)) else _as2d(x) for x in row])
    ncols = len(wrapped[0])
    heights = [None] * len(wrapped)
    widths = [None] * ncols
    for i, row in enumerate(wrapped):
        for j, x in enumerate(row):
            shp = x.shape if not isinstance(x, VarHandle) else x.shape
            if shp == (1, 1):
                continue
            heights[i] = shp[0] if heights[i] is None else heights[i]
            widths[j] = shp[1] if widths[j] is None else widths[j]
    heights = [h if h is not None else 1 for h in heights]
    widths = [w if w is not None else 1 for w in widths]
    H, W = sum(heights), sum(widths)
    roff = np.concatenate([[0], np.cumsum(heights)])
    coff = np.concatenate([[0], np.cumsum(widths)])
    out = MatExpr((H, W), np.zeros((H, W)))
    for i, row in enumerate(wrapped):
        for j, x in enumerate(row):
            h, w = heights[i], widths[j]
            if isinstance(x, VarHandle):
                x = x.expr()
            if isinstance(x, MatExpr):
                if x.shape != (h, w):
                    if x.shape == (1, 1) and not x.terms and x.const[0, 0] == 0.0:
                        continue
                    raise DimensionError(f"block ({i},{j}) has shape {x.shape}, expected {(h, w)}")
                Er = np.zeros((H, h))
                Er[roff[i]:roff[i] + h] = np.eye(h)
                Ec = np.zeros((w, W))
                Ec[:, coff[j]:coff[j] + w] = np.eye(w)
                out = out + Er @ x @ Ec
            else:
                if x.shape == (1, 1) and (h, w) != (1, 1):
                    if x[0, 0] != 0.0:
                        raise DimensionError("scalar block in a non-scalar slot must be 0")
                    continue
                if x.shape != (h, w):
                    raise DimensionError(f"block ({i},{j}) has shape {x.shape}, expected {(h, w)}")
                out.const[roff[i]:roff[i] + h, coff[j]:coff[j] + w] += x
    return out


def schur_embed(main, off, corner_scalar, corner_dim=None) -> MatExpr:
    """Bordered block whose Schur complement recovers a quadratic term.

    Builds ``[[main, off.T], [off, corner_scalar * I]]``; with a negative
    definite corner ``-c*I`` the enlarged block is negative definite iff
    ``main + (1/c) off' off`` is.
    """
    main = MatExpr.wrap(main)
    off = MatExpr.wrap(off)
    if off.shape[1] != main.shape[0]:
        raise DimensionError(f"off block columns {off.shape[1]} must match main dim {main.shape[0]}")
    d = off.shape[0] if corner_dim is None else corner_dim
    corner = corner_scalar * np.eye(d) if not isinstance(corner_scalar, (MatExpr, VarHandle)) \
        else corner_scalar
    return block_expr([[main, off.T], [off, corner]])


@dataclass
class _Constraint:
    kind: str  # psd | zero | nonneg
    expr: MatExpr
    margin: float = 0.0
    name: str = ""


@dataclass
class SdpSolution:
    """Solver outcome with per-variable values and a feasibility audit."""

    status: str  # optimal | infeasible | inaccurate | error
    values: dict
    objective_value: float
    max_constraint_violation: float
    solver: str = ""
    iterations: int = 0
    solve_time: float = 0.0

    @property
    def is_optimal(self) -> bool:
        return self.status == "optimal"


class SdpProblem:
    """Container for variables, matrix-inequality constraints, and objective."""

    def __init__(self, name: str = ""):
        self.name = name
        self.variables: dict[str, VarHandle] = {}
        self.constraints: list[_Constraint] = []
        self.objective: MatExpr | None = None
        self._n_params = 0

    # -- variables ---------------------------------------------------------
    def _register(self, name, kind, shape) -> VarHandle:
        if name in self.variables:
            raise ValueError(f"variable {name!r} already registered")
        h = VarHandle(name, kind, shape, self._n_params)
        self.variables[name] = h
        self._n_params += h.n_params
        return h

    def add_symmetric(self, name: str, n: int) -> VarHandle:
        return self._register(name, "symmetric", (n, n))

    def add_rectangular(self, name: str, m: int, n: int) -> VarHandle:
        return self._register(name, "rectangular", (m, n))

    def add_scalar(self, name: str) -> VarHandle:
        return self._register(name, "scalar", (1, 1))

    # -- constraints ---------------------------------------------------------
    def add_psd(self, expr, margin: float = 0.0, name: str = "") -> None:
        """Constrain ``expr - margin * I`` to the PSD cone."""
        expr = MatExpr.wrap(expr)
        if expr.shape[0] != expr.shape[1]:
            raise DimensionError("PSD constraint requires a square expression")
        if expr.shape[0] == 0:
            return
        self.constraints.append(_Constraint("psd", expr, margin, name))

    def add_nsd(self, expr, margin: float = 0.0, name: str = "") -> None:
        """Constrain ``expr + margin * I`` to be negative semidefinite."""
        self.add_psd(-MatExpr.wrap(expr), margin, name)

    def add_equality(self, expr, name: str = "") -> None:
        expr = MatExpr.wrap(expr)
        if expr.shape[0] * expr.shape[1] == 0:
            return
        self.constraints.append(_Constraint("zero", expr, 0.0, name))

    def add_nonneg(self, expr, name: str = "") -> None:
        """Entrywise nonnegativity of a (usually scalar) expression."""
        expr = MatExpr.wrap(expr)
        if expr.shape[0] * expr.shape[1] == 0:
            return
        self.constraints.append(_Constraint("nonneg", expr, 0.0, name))

    def set_objective(self, expr) -> None:
        """Minimize a scalar affine expression."""
        expr = MatExpr.wrap(expr)
        if expr.shape != (1, 1):
            raise DimensionError("objective must be scalar")
        self.objective = expr

    def bound_variable_norms(self, kappa, exclude=(), include=None) -> None:
        """Cap the spectral norm of selected variables.

        ``kappa`` may be a constant or a scalar variable handle.
        Certificate sets carry recession rays along which the objective
        is flat; the caps keep the relevant face compact so interior
        point backends stay well behaved.
        """
        def cap_expr(d):
            if isinstance(kappa, (VarHandle, MatExpr)):
                return scalar_times(kappa, np.eye(d))
            return kappa * np.eye(d)

        for name, h in self.variables.items():
            if name in exclude or (include is not None and name not in include):
                continue
            m, n = h.shape
            if h.kind == "symmetric":
                self.add_psd(cap_expr(m) - h.expr(), name=f"cap+{name}")
                self.add_psd(cap_expr(m) + h.expr(), name=f"cap-{name}")
            elif h.kind == "scalar":
                kk = kappa.expr() if isinstance(kappa, VarHandle) else MatExpr.wrap(kappa)
                self.add_nonneg(kk - h.expr(), name=f"cap+{name}")
                self.add_nonneg(kk + h.expr(), name=f"cap-{name}")
            else:
                self.add_psd(block_expr([[cap_expr(m), h], [h.T, cap_expr(n)]]),
                             name=f"cap{name}")

    # -- canonicalization ----------------------------------------------------
    def _param_jacobian(self, e: MatExpr) -> tuple[np.ndarray, np.ndarray]:
        """Dense Jacobian d vec_F(e)/d params and the constant vec_F part."""
        r, c = e.shape
        J = np.zeros((r * c, self._n_params))
        for name, tl in e.terms.items():
            h = self.variables[name]
            m, n = h.shape
            Jv = np.zeros((r * c, m * n))
            for L, R, t in tl:
                contrib = np.kron(R.T, L)  # maps vec_F(arg) -> vec_F(L arg R)
                if t:
                    # arg = X^T: reorder columns onto vec_F(X)
                    perm = np.arange(m * n).reshape(m, n, order="F").T.reshape(-1, order="F")
                    Jv[:, perm] += contrib
                else:
                    Jv += contrib
            if h.kind == "symmetric":
                Jv = Jv @ _fold_matrix(m)
            J[:, h.offset:h.offset + h.n_params] += Jv
        return J, e.const.reshape(-1, order="F")

    def _svec_jacobian(self, e: MatExpr, ii: np.ndarray, jj: np.ndarray,
                       fac: np.ndarray) -> np.ndarray:
        """Jacobian of the scaled-triangle entries of ``sym(e)``.

        Builds only the requested (i, j) rows: the row of
        ``kron(R', L)`` for entry (i, j) is the outer product of L[i, :]
        and R[:, j], so gathered assembly avoids the full Kronecker
        blow-up on large constraints.
        """
        d = e.shape[0]
        K = ii.size
        J = np.zeros((K, self._n_params))
        for name, tl in e.terms.items():
            h = self.variables[name]
            m, n = h.shape
            Jv = np.zeros((K, m * n))
            for L, R, t in tl:
                # entry (a, b) of L X R depends on X[p, q] via L[a,p] R[q,b]
                blk = (np.einsum("kp,qk->kqp", L[ii], R[:, jj])
                       + np.einsum("kp,qk->kqp", L[jj], R[:, ii]))
                blk = blk.reshape(K, m * n)  # column index q*m + p... see below
                # reshape gives index p fastest? kqp C-order flattens p fastest
                if t:
                    # arg = X^T of shape (n, m): remap onto vec_F(X)
                    perm = np.arange(m * n).reshape(m, n, order="F").T.reshape(-1, order="F")
                    Jv[:, perm] += blk
                else:
                    Jv += blk
            if h.kind == "symmetric":
                pl, ql = np.tril_indices(m)
                Jtril = Jv[:, pl + ql * m].copy()
                off = pl != ql
                Jtril[:, off] += Jv[:, (ql + pl * m)[off]]
                Jv = Jtril
            J[:, h.offset:h.offset + h.n_params] += fac[:, None] * Jv
        return J

    def unpack(self, x: np.ndarray) -> dict:
        """Map a flat parameter vector back to variable matrices."""
        out = {}
        for name, h in self.variables.items():
            p = x[h.offset:h.offset + h.n_params]
            m, n = h.shape
            if h.kind == "symmetric":
                M = np.zeros((m, m))
                M[np.tril_indices(m)] = p
                M = M + M.T - np.diag(np.diag(M))
                out[name] = M
            elif h.kind == "scalar":
                out[name] = float(p[0])
            else:
                out[name] = p.reshape((m, n), order="F")
        return out

    def pack(self, values: dict) -> np.ndarray:
        """Flatten a dict of variable values into the parameter vector."""
        x = np.zeros(self._n_params)
        for name, h in self.variables.items():
            if name not in values:
                continue
            v = np.atleast_2d(np.asarray(values[name], float))
            m, n = h.shape
            if h.kind == "symmetric":
                x[h.offset:h.offset + h.n_params] = v[np.tril_indices(m)]
            elif h.kind == "scalar":
                x[h.offset] = float(v)
            else:
                x[h.offset:h.offset + h.n_params] = v.reshape(-1, order="F")
        return x

    def constraint_violation(self, values: dict) -> float:
        """Worst violation across all constraints at the given values."""
        worst = 0.0
        for con in self.constraints:
            M = con.expr.value(values)
            if con.kind == "psd":
                lam = np.linalg.eigvalsh(0.5 * (M + M.T) - con.margin * np.eye(M.shape[0]))
                worst = max(worst, float(max(-lam[0], 0.0)))
            elif con.kind == "zero":
                worst = max(worst, float(np.max(np.abs(M))) if M.size else 0.0)
            else:
                worst = max(worst, float(max(np.max(-M), 0.0)) if M.size else 0.0)
        return worst


def _svec_maps(d: int, layout: str):
    """Row index pairs of the scaled triangle in the backend's ordering."""
    pairs = []
    if layout == "upper-col":
        for j in range(d):
            for i in range(j + 1):
                pairs.append((i, j))
    else:  # lower-col
        for j in range(d):
            for i in range(j, d):
                pairs.append((i, j))
    return pairs


def _canonicalize(problem: SdpProblem, layout: str, scale_rows: bool):
    N = problem._n_params
    if problem.objective is not None:
        Jq, cq = problem._param_jacobian(problem.objective)
        q = Jq[0]
        obj_const = float(cq[0])
    else:
        q = np.zeros(N)
        obj_const = 0.0
    cone_zero = 0
    cone_nonneg = 0
    psd_dims = []
    # order: zero cone, nonneg cone, psd cones
    zero_A, zero_b, nn_A, nn_b, psd_A, psd_b = [], [], [], [], [], []
    for con in problem.constraints:
        if con.kind == "zero":
            J, c0 = problem._param_jacobian(con.expr)
            zero_A.append(-J)
            zero_b.append(c0)
            cone_zero += c0.size
        elif con.kind == "nonneg":
            J, c0 = problem._param_jacobian(con.expr)
            nn_A.append(-J)
            nn_b.append(c0)
            cone_nonneg += c0.size
        else:
            d = con.expr.shape[0]
            pairs = _svec_maps(d, layout)
            ii = np.array([p[0] for p in pairs], int)
            jj = np.array([p[1] for p in pairs], int)
            # svec of the symmetrized matrix: 0.5 averaging, sqrt(2) off-diag scale
            fac = np.where(ii == jj, 0.5, np.sqrt(2.0) / 2.0)
            c0 = con.expr.const.reshape(-1, order="F")
            c0s = c0 - (con.margin * np.eye(d)).reshape(-1, order="F")
            Js = problem._svec_jacobian(con.expr, ii, jj, fac)
            bs = (c0s[ii + jj * d] + c0s[jj + ii * d]) * fac
            if scale_rows:
                s = max(float(np.max(np.abs(Js))) if Js.size else 0.0,
                        float(np.max(np.abs(bs))) if bs.size else 0.0, 1e-12)
                Js, bs = Js / s, bs / s
            psd_A.append(-Js)
            psd_b.append(bs)
            psd_dims.append(d)
    A = np.vstack(zero_A + nn_A + psd_A) if (zero_A or nn_A or psd_A) else np.zeros((0, N))
    b = np.concatenate(zero_b + nn_b + psd_b) if (zero_b or nn_b or psd_b) else np.zeros(0)
    return q, obj_const, sp.csc_matrix(A), b, cone_zero, cone_nonneg, psd_dims


def _cached_canonicalize(problem, layout, scale, options):
    cache = options.get("_cache")
    if cache is None:
        return _canonicalize(problem, layout, scale)
    key = (layout, bool(scale))
    if key not in cache:
        cache[key] = _canonicalize(problem, layout, scale)
    return cache[key]


def _solve_clarabel(problem: SdpProblem, options: dict) -> SdpSolution:
    import clarabel

    # clarabel equilibrates internally; extra row scaling tends to hurt it
    q, obj_const, A, b, nzero, nnn, psd_dims = _cached_canonicalize(
        problem, "upper-col", options.get("scale", False), options)
    cones = []
    if nzero:
        cones.append(clarabel.ZeroConeT(nzero))
    if nnn:
        cones.append(clarabel.NonnegativeConeT(nnn))
    cones.extend(clarabel.PSDTriangleConeT(d) for d in psd_dims)
    settings = clarabel.DefaultSettings()
    settings.verbose = bool(options.get("verbose", False))
    settings.tol_feas = options.get("tol_feas", 1e-8)
    settings.tol_gap_abs = options.get("tol_gap", 1e-8)
    settings.tol_gap_rel = options.get("tol_gap", 1e-8)
    settings.max_iter = options.get("max_iter", 200)
    P = sp.csc_matrix((q.size, q.size))
    try:
        solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
        res = solver.solve()
    except BaseException as exc:  # clarabel raises pyo3 exceptions
        raise BackendFailureError(f"clarabel failed: {exc}") from exc
    status_name = str(res.status)
    mapping = {
        "Solved": "optimal",
        "AlmostSolved": "inaccurate",
        "PrimalInfeasible": "infeasible",
        "AlmostPrimalInfeasible": "infeasible",
        "DualInfeasible": "error",
        "AlmostDualInfeasible": "error",
        "MaxIterations": "inaccurate",
        "MaxTime": "inaccurate",
        "InsufficientProgress": "inaccurate",
    }
    status = mapping.get(status_name.split(".")[-1], "error")
    x = np.asarray(res.x, float) if status in ("optimal", "inaccurate") else np.zeros(q.size)
    values = problem.unpack(x)
    viol = problem.constraint_violation(values) if status in ("optimal", "inaccurate") else np.inf
    obj = float(res.obj_val) + obj_const if status in ("optimal", "inaccurate") else np.nan
    return SdpSolution(status, values, obj, viol, "clarabel",
                       int(res.iterations), float(res.solve_time))


def _solve_scs(problem: SdpProblem, options: dict) -> SdpSolution:
    import scs

    q, obj_const, A, b, nzero, nnn, psd_dims = _cached_canonicalize(
        problem, "lower-col", options.get("scale", True), options)
    cone = {}
    if nzero:
        cone["z"] = nzero
    if nnn:
        cone["l"] = nnn
    if psd_dims:
        cone["s"] = psd_dims
    data = dict(P=sp.csc_matrix((q.size, q.size)), A=A, b=b, c=q)
    warm = options.get("warm_values")
    try:
        solver = scs.SCS(data, cone, verbose=bool(options.get("verbose", False)),
                         eps_abs=options.get("tol_feas", 1e-8),
                         eps_rel=options.get("tol_gap", 1e-8),
                         max_iters=options.get("max_iter", 100_000))
        if warm is not None:
            x0 = problem.pack(warm)
            out = solver.solve(warm_start=True, x=x0,
                               y=np.zeros(b.size), s=np.asarray(b - A @ x0))
        else:
            out = solver.solve()
    except BaseException as exc:
        raise BackendFailureError(f"scs failed: {exc}") from exc
    sname = out["info"]["status"].lower()
    if sname.startswith("solved (inaccurate"):
        status = "inaccurate"
    elif sname == "solved":
        status = "optimal"
    elif "infeasible" in sname:
        status = "infeasible"
    else:
        status = "error"
    x = np.asarray(out["x"], float) if status in ("optimal", "inaccurate") else np.zeros(q.size)
    values = problem.unpack(x)
    viol = problem.constraint_violation(values) if status in ("optimal", "inaccurate") else np.inf
    obj = float(q @ x) + obj_const if status in ("optimal", "inaccurate") else np.nan
    return SdpSolution(status, values, obj, viol, "scs",
                       int(out["info"]["iter"]), float(out["info"]["solve_time"]) / 1e3)


_BACKENDS = {"clarabel": _solve_clarabel, "scs": _solve_scs}


def solve_sdp(problem: SdpProblem, **options) -> SdpSolution:
    """Solve the assembled problem with the selected conic backend.

    The backend comes from ``options['solver']``, else the
    ``IQCSYN_SOLVER`` environment variable, else clarabel.  On a plain
    numerical breakdown (not infeasibility) a fixed retry ladder toggles
    the pre-scaling and then relaxes the tolerances one decade; statuses
    are reported faithfully and an inaccurate or infeasible outcome is
    never silently treated as optimal.
    """
    name = options.pop("solver", None) or os.environ.get("IQCSYN_SOLVER", "clarabel")
    if name not in _BACKENDS:
        raise BackendFailureError(f"unknown solver backend {name!r}")
    retry = options.pop("retry", True)
    options = dict(options)
    options.setdefault("_cache", {})
    out = _BACKENDS[name](problem, options)
    if out.status == "optimal" or not retry:
        return out
    # the row scaling helps some conditioning regimes and hurts others;
    # try the flipped variant and keep the better certified outcome
    flipped = dict(options)
    flipped["scale"] = not options.get("scale", name != "clarabel")
    out2 = _BACKENDS[name](problem, flipped)
    ranking = {"optimal": 0, "inaccurate": 1, "infeasible": 2, "error": 3}

    def better(a, b):
        ka, kb = ranking.get(a.status, 3), ranking.get(b.status, 3)
        if ka != kb:
            return a if ka < kb else b
        if a.status == "inaccurate":
            return a if a.max_constraint_violation <= b.max_constraint_violation else b
        return a
    best = better(out, out2)
    if best.status != "error":
        return best
    loose = dict(options)
    loose["tol_feas"] = 10.0 * options.get("tol_feas", 1e-8)
    loose["tol_gap"] = 10.0 * options.get("tol_gap", 1e-8)
    return better(best, _BACKENDS[name](problem, loose))


def write_sdpa(problem: SdpProblem, path) -> None:
    """Dump the problem in sparse SDPA format for external cross-checks.

    Equality constraints are written as paired inequalities; nonnegative
    rows become a diagonal block.
    """
    entries = []  # (matno, blkno, i, j, value) with 1-based indices
    block_sizes = []
    N = problem._n_params

    def add_matrix(J_col, c0, blkno, d, diag):
        # F0 is -const in SDPA's sum_i x_i F_i - F0 >= 0 convention
        for idx in range(c0.size):
            if diag:
                i = j = idx + 1
            else:
                i, j = idx % d + 1, idx // d + 1
                if i > j:
                    continue
            if c0[idx] != 0.0:
                entries.append((0, blkno, i, j, -c0[idx]))
        for v in range(N):
            col = J_col[:, v]
            for idx in np.nonzero(col)[0]:
                if diag:
                    i = j = idx + 1
                else:
                    i, j = idx % d + 1, idx // d + 1
                    if i > j:
                        continue
                entries.append((v + 1, blkno, i, j, col[idx]))

    blkno = 0
    diag_rows_J, diag_rows_c = [], []
    for con in problem.constraints:
        J, c0 = problem._param_jacobian(con.expr)
        if con.kind == "psd":
            blkno += 1
            d = con.expr.shape[0]
            block_sizes.append(d)
            shift = (con.margin * np.eye(d)).reshape(-1, order="F")
            add_matrix(J, c0 - shift, blkno, d, diag=False)
        elif con.kind == "nonneg":
            diag_rows_J.append(J)
            diag_rows_c.append(c0)
        else:  # equality -> two inequalities
            diag_rows_J.extend([J, -J])
            diag_rows_c.extend([c0, -c0])
    if diag_rows_J:
        blkno += 1
        Jd = np.vstack(diag_rows_J)
        cd = np.concatenate(diag_rows_c)
        block_sizes.append(-cd.size)
        add_matrix(Jd, cd, blkno, cd.size, diag=True)
    qJ = np.zeros(N)
    if problem.objective is not None:
        qJ = problem._param_jacobian(problem.objective)[0][0]
    with open(path, "w") as fh:
        fh.write(f"{N} = mDIM\n{len(block_sizes)} = nBLOCK\n")
        fh.write("(" + ", ".join(str(s) for s in block_sizes) + ") = bLOCKsTRUCT\n")
        fh.write("{" + ", ".join(repr(float(v)) for v in qJ) + "}\n")
        for m, blk, i, j, v in entries:
            fh.write(f"{m} {blk} {i} {j} {v!r}\n")
