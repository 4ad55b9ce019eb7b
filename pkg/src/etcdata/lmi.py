"""Small dense LMI layer on top of cvxpy.

Problems are built from named decision blocks and symmetric matrix
expressions required to satisfy ``expr <= -margin * I``. Solutions are always
re-certified with a numpy eigenvalue check; the solver's status alone is never
trusted.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable

import cvxpy as cp
import numpy as np

from .errors import InvalidArgument, NoFeasiblePoint

OPTIMAL, FEASIBLE, INFEASIBLE, UNBOUNDED, NUMERICAL_FAILURE = (
    "optimal", "feasible", "infeasible", "unbounded", "numerical-failure")


@dataclass(frozen=True)
class SolverOptions:
    solver: str = "CLARABEL"
    tol_post: float = 1e-7
    tol_eq: float = 1e-7
    strict_margin: float = 1e-6
    solver_tol: float = 1e-10
    max_iter: int = 500
    verbose: bool = False

    def solver_kwargs(self) -> dict:
        if self.solver == "CLARABEL":
            return {"tol_gap_abs": self.solver_tol, "tol_gap_rel": self.solver_tol,
                    "tol_feas": self.solver_tol, "max_iter": self.max_iter}
        if self.solver == "SCS":
            return {"eps": self.solver_tol, "max_iters": 100 * self.max_iter}
        if self.solver == "CVXOPT":
            return {"abstol": self.solver_tol, "reltol": self.solver_tol, "feastol": self.solver_tol,
                    "max_iters": self.max_iter}
        return {}

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LmiConstraint:
    name: str
    expr: cp.Expression
    margin: float


@dataclass
class LmiSolution:
    status: str
    assignment: dict[str, np.ndarray]
    max_constraint_eig: float
    constraint_eigs: dict[str, float] = field(default_factory=dict)
    objective: float | None = None
    solver_status: str = ""

    @property
    def ok(self) -> bool:
        return self.status in (OPTIMAL, FEASIBLE)

    def __getitem__(self, name):
        return self.assignment[name]


class LmiProblem:
    """Named decision blocks, LMI constraints, affine equalities, optional objective."""

    def __init__(self, name: str = "lmi"):
        self.name = name
        self.variables: dict[str, cp.Variable] = {}
        self.constraints: list[LmiConstraint] = []
        self.equalities: list[tuple[str, cp.Expression]] = []
        self.objective: cp.Expression | None = None
        self.sense = "min"

    def variable(self, name: str, shape=(), symmetric: bool = False) -> cp.Variable:
        if name in self.variables:
            raise InvalidArgument(f"variable {name!r} declared twice")
        v = cp.Variable(shape, name=name, symmetric=symmetric) if symmetric else cp.Variable(shape, name=name)
        self.variables[name] = v
        return v

    def _check_vars(self, expr):
        known = {id(v) for v in self.variables.values()}
        for v in expr.variables():
            if id(v) not in known:
                raise InvalidArgument(f"expression uses undeclared variable {v.name()}")

    def add_lmi(self, expr, margin: float = 0.0, name: str | None = None) -> None:
        """Require ``expr <= -margin * I``; scalar expressions are treated as 1x1."""
        expr = cp.Constant(expr) if not isinstance(expr, cp.Expression) else expr
        if margin < 0:
            raise InvalidArgument("margin must be non-negative")
        if expr.ndim == 0:
            expr = cp.reshape(expr, (1, 1), order="F")
        if expr.ndim != 2 or expr.shape[0] != expr.shape[1]:
            raise InvalidArgument(f"LMI expression must be square, got shape {expr.shape}")
        self._check_vars(expr)
        self.constraints.append(LmiConstraint(name or f"c{len(self.constraints)}", expr, float(margin)))

    def add_equality(self, lhs, rhs=0.0, name: str | None = None) -> None:
        expr = lhs - rhs
        if isinstance(expr, cp.Expression):
            self._check_vars(expr)
        self.equalities.append((name or f"e{len(self.equalities)}", expr))

    def minimize(self, expr) -> None:
        self.objective, self.sense = expr, "min"

    def maximize(self, expr) -> None:
        self.objective, self.sense = expr, "max"

    def to_cvxpy(self) -> cp.Problem:
        cons = []
        for c in self.constraints:
            k = c.expr.shape[0]
            sym = 0.5 * (c.expr + c.expr.T)
            cons.append(sym + c.margin * np.eye(k) << 0)
        for _, e in self.equalities:
            cons.append(e == 0)
        if self.objective is None:
            obj = cp.Minimize(0)
        else:
            obj = cp.Minimize(self.objective) if self.sense == "min" else cp.Maximize(self.objective)
        return cp.Problem(obj, cons)

    def dump(self) -> str:
        """Plain-text dump: each constraint as F0 + sum_i v_i F_i over scalar entries v_i."""
        out = io.StringIO()
        out.write(f"PROBLEM {self.name}\n")
        saved = {k: v.value for k, v in self.variables.items()}
        for k, v in self.variables.items():
            out.write(f"VARIABLE {k} shape={v.shape} symmetric={v.ndim == 2 and v.is_symmetric()}\n")
        try:
            for v in self.variables.values():
                v.value = np.zeros(v.shape)
            blocks = [(f"LMI {c.name} margin={c.margin:g}", c.expr) for c in self.constraints]
            blocks += [(f"EQ {nm}", e) for nm, e in self.equalities if isinstance(e, cp.Expression)]
            for title, expr in blocks:
                out.write(title + "\n")
                base = np.atleast_2d(expr.value)
                out.write("  F0\n" + _fmt(base))
                for k, v in self.variables.items():
                    for idx in np.ndindex(*v.shape) if v.shape else [()]:
                        sym = v.ndim == 2 and v.is_symmetric()
                        if sym and idx[0] > idx[1]:
                            continue
                        e = np.zeros(v.shape)
                        e[idx] = 1.0
                        if sym:
                            e[idx[::-1]] = 1.0
                        v.value = e
                        d = np.atleast_2d(expr.value) - base
                        v.value = np.zeros(v.shape)
                        if np.any(d):
                            out.write(f"  d/d {k}{list(idx)}\n" + _fmt(d))
        finally:
            for k, v in self.variables.items():
                v.value = saved[k]
        return out.getvalue()


def _fmt(M) -> str:
    return "".join("    " + " ".join(f"{x: .10g}" for x in row) + "\n" for row in np.atleast_2d(M))


def _certify(p: LmiProblem, opts: SolverOptions):
    eigs, ok = {}, True
    for c in p.constraints:
        V = np.atleast_2d(np.asarray(c.expr.value, dtype=float))
        lam = float(np.linalg.eigvalsh(0.5 * (V + V.T)).max())
        eigs[c.name] = lam
        scale = max(1.0, float(np.linalg.norm(V, 2)))
        if lam + c.margin > opts.tol_post * scale:
            ok = False
    for _, e in p.equalities:
        r = np.asarray(e.value if isinstance(e, cp.Expression) else e, dtype=float)
        if r.size and np.abs(r).max() > opts.tol_eq:
            ok = False
    return ok, eigs


def solve(p: LmiProblem, opts: SolverOptions | None = None) -> LmiSolution:
    opts = opts or SolverOptions()
    prob = p.to_cvxpy()
    try:
        prob.solve(solver=opts.solver, verbose=opts.verbose, **opts.solver_kwargs())
    except cp.error.SolverError as exc:
        return LmiSolution(NUMERICAL_FAILURE, {}, np.inf, solver_status=str(exc))
    st = prob.status
    if st in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return LmiSolution(INFEASIBLE, {}, np.inf, solver_status=st)
    if st in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        return LmiSolution(UNBOUNDED, {}, np.inf, solver_status=st)
    if any(v.value is None for v in p.variables.values()):
        return LmiSolution(NUMERICAL_FAILURE, {}, np.inf, solver_status=st)
    ok, eigs = _certify(p, opts)
    assignment = {k: np.array(v.value, dtype=float) for k, v in p.variables.items()}
    worst = max(eigs.values(), default=-np.inf)
    if not ok:
        status = NUMERICAL_FAILURE
    else:
        status = OPTIMAL if p.objective is not None else FEASIBLE
    obj = None if p.objective is None else float(np.asarray(p.objective.value))
    return LmiSolution(status, assignment, worst, eigs, obj, st)


def bisect_feasible(param_builder: Callable[[float], LmiProblem], lo: float, hi: float, tol: float,
                    opts: SolverOptions | None = None) -> float:
    """Largest parameter in [lo, hi] (to within tol) whose problem is feasible."""
    if not lo <= hi:
        raise InvalidArgument("need lo <= hi")

    def feasible(v):
        return solve(param_builder(v), opts).ok

    if not feasible(lo):
        raise NoFeasiblePoint(f"problem infeasible at lower end {lo}")
    if feasible(hi):
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def min_eig(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise InvalidArgument("matrix has non-finite entries")
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def max_eig(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise InvalidArgument("matrix has non-finite entries")
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


def affine_parameterization(A, B, rtol: float = 1e-10):
    """Return ``(X_p, N)`` with ``{X : A X = B} = {X_p + N W}``.

    Requires A to have full row rank; ``X_p`` is the least-norm solution and the
    columns of ``N`` are an orthonormal basis of ker A.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    U, sv, Vt = np.linalg.svd(A)
    r = int(np.sum(sv > rtol * sv[0])) if sv.size else 0
    if r < A.shape[0]:
        raise InvalidArgument(f"matrix does not have full row rank ({r} < {A.shape[0]})")
    Xp = Vt[:r].T @ ((U[:, :r].T @ B) / sv[:r, None] if B.ndim == 2 else (U[:, :r].T @ B) / sv[:r])
    N = Vt[r:].T
    return Xp, N
