"""Data-based synthesis of ``u = K zeta(x)``.

Both programs use the substitution ``Y1 = G1 P``. The equality
``Z0 G = I_s`` is eliminated by writing ``Y1 = Z0^+ [P; 0] + N W1`` and
``G2 = Z0^+ [0; I] + N W2`` with ``N`` spanning ker Z0, so the closed-loop identities
hold to rounding error rather than to solver tolerance.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cvxpy as cp
import numpy as np

from . import lmi
from .errors import InvalidArgument, PreconditionError, SynthesisInfeasible
from .experiment import check_richness, data_hash
from .model import DataMatrices, FunctionLibrary, RegionBox

LINEARIZATION = "linearization"
CONTRACTIVE = "contractive"


@dataclass
class Controller:
    K: np.ndarray
    G: np.ndarray
    L: np.ndarray
    P: np.ndarray
    S: np.ndarray
    method: str
    Omega: np.ndarray
    Theta: np.ndarray
    Phi: np.ndarray
    beta: float | None = None
    region: RegionBox | None = None
    RQ: np.ndarray | None = None
    alpha: float | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def s(self):
        return self.K.shape[1]

    @property
    def G1(self):
        return self.G[:, :self.n]

    @property
    def G2(self):
        return self.G[:, self.n:]

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "method": self.method,
            "K": arr(self.K), "G": arr(self.G), "L": arr(self.L),
            "P": arr(self.P), "S": arr(self.S), "Omega": arr(self.Omega),
            "Theta": arr(self.Theta), "Phi": arr(self.Phi), "beta": self.beta,
            "RQ": arr(self.RQ), "alpha": self.alpha,
            "region": None if self.region is None else self.region.to_dict(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Controller":
        def arr(k, shape_like=None):
            v = d.get(k)
            return None if v is None else np.array(v, dtype=float)
        n = len(d["P"])
        RQ = arr("RQ")
        if RQ is not None:
            RQ = RQ.reshape(n, -1)
        return cls(K=np.atleast_2d(arr("K")), G=arr("G"), L=arr("L"), P=arr("P"), S=arr("S"),
                   method=d["method"], Omega=arr("Omega"), Theta=arr("Theta"),
                   Phi=arr("Phi").reshape(n, -1), beta=d.get("beta"),
                   region=None if d.get("region") is None else RegionBox.from_dict(d["region"]),
                   RQ=RQ, alpha=d.get("alpha"), provenance=d.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Controller":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_inputs(D: DataMatrices, Omega, richness_tol):
    if not check_richness(D, richness_tol)["full_rank"]:
        raise PreconditionError("[U0; Z0] is not full row rank: the data are not rich enough "
                                "(collect more samples or use a more exciting input)")
    n = D.n
    Omega = np.eye(n) if Omega is None else np.atleast_2d(np.asarray(Omega, dtype=float))
    if Omega.shape != (n, n) or not np.allclose(Omega, Omega.T):
        raise PreconditionError(f"Omega must be a symmetric {n}x{n} matrix")
    if lmi.min_eig(Omega) <= 0:
        raise PreconditionError("Omega must be positive definite")
    return Omega


def _parameterize(p: lmi.LmiProblem, D: DataMatrices):
    """Declare P, W1, W2 and return (P, Y1, G2, constants) with Z0 Y1 = [P;0], Z0 G2 = [0;I]."""
    n, s = D.n, D.s
    Zp = np.linalg.pinv(D.Z0)
    _, N = lmi.affine_parameterization(D.Z0, np.zeros((s, n)))
    P = p.variable("P", (n, n), symmetric=True)
    k = N.shape[1]
    Y1 = Zp[:, :n] @ P
    if k:
        W1 = p.variable("W1", (k, n))
        Y1 = Y1 + N @ W1
    G2 = None
    if s > n:
        G2 = Zp[:, n:] @ np.eye(s - n)
        if k:
            W2 = p.variable("W2", (k, s - n))
            G2 = G2 + N @ W2
    return P, Y1, G2, (Zp, N)


def _recover(sol: lmi.LmiSolution, D: DataMatrices, consts):
    n, s = D.n, D.s
    Zp, N = consts
    P = sol["P"]
    P = 0.5 * (P + P.T)
    S = np.linalg.inv(P)
    S = 0.5 * (S + S.T)
    Y1 = Zp[:, :n] @ P
    if N.shape[1]:
        Y1 = Y1 + N @ sol["W1"]
    G1 = Y1 @ S
    if s > n:
        G2 = Zp[:, n:].copy()
        if N.shape[1]:
            G2 = G2 + N @ sol["W2"]
        G = np.hstack([G1, G2])
    else:
        G = G1
    K = D.U0 @ G
    return P, S, G, K


def _provenance(D, opts, sol):
    return {"data_hash": data_hash(D), "data_config_hash": D.meta.get("config_hash"),
            "solver": opts.to_dict(), "solver_status": sol.solver_status,
            "max_constraint_eig": sol.max_constraint_eig}


def design_linearization(D: DataMatrices, Omega=None, opts: lmi.SolverOptions | None = None,
                         richness_tol: float = 1e-8, library: FunctionLibrary | None = None) -> Controller:
    """Minimise ||X1 G2|| subject to X1 G1 P + P (X1 G1)^T + Omega <= 0."""
    opts = opts or lmi.SolverOptions()
    Omega = _check_inputs(D, Omega, richness_tol)
    if library is not None and not library.higher_order:
        warnings.warn("Q has a nonzero linear part at the origin; local stability of the "
                      "linearization design is not implied by a Hurwitz X1 G1", stacklevel=2)
    n, s = D.n, D.s
    p = lmi.LmiProblem("linearization")
    P, Y1, G2, consts = _parameterize(p, D)
    X1Y1 = D.X1 @ Y1
    p.add_lmi(X1Y1 + X1Y1.T + Omega, 0.0, "lyapunov")
    p.add_lmi(-P, opts.strict_margin, "P_pos")
    if s > n:
        alpha = p.variable("alpha")
        X1G2 = D.X1 @ G2
        p.add_lmi(cp.bmat([[-alpha * np.eye(n), X1G2], [X1G2.T, -alpha * np.eye(s - n)]]), 0.0, "epigraph")
        p.minimize(alpha)
    sol = lmi.solve(p, opts)
    if not sol.ok:
        raise SynthesisInfeasible(f"linearization program failed: {sol.status} ({sol.solver_status})",
                                  status=sol.status)
    Pv, S, G, K = _recover(sol, D, consts)
    L = recover_L(D, K, richness_tol)
    X1G2v = D.X1 @ G[:, n:]
    return Controller(K=K, G=G, L=L, P=Pv, S=S, method=LINEARIZATION, Omega=Omega,
                      Theta=S @ Omega @ S, Phi=S @ X1G2v, beta=None,
                      alpha=float(np.linalg.norm(X1G2v, 2)) if s > n else 0.0,
                      provenance=_provenance(D, opts, sol))


def sqrt_psd(M) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def contraction_rate(S, Omega) -> float:
    """beta = lambda_min(S^(1/2) Omega S^(1/2))."""
    R = sqrt_psd(S)
    return lmi.min_eig(R @ Omega @ R)


def design_contractive(D: DataMatrices, Omega=None, RQ=None, region: RegionBox | None = None,
                       opts: lmi.SolverOptions | None = None, richness_tol: float = 1e-8,
                       library: FunctionLibrary | None = None) -> Controller:
    """Feasibility of the 3x3 block LMI making X1 G zeta contractive on ``region``.

    When ``library`` and ``region`` are given, RQ is checked against the
    Jacobian of Q on the region grid; otherwise it is trusted.
    """
    opts = opts or lmi.SolverOptions()
    Omega = _check_inputs(D, Omega, richness_tol)
    n, s = D.n, D.s
    RQ = np.zeros((n, 0)) if RQ is None else np.asarray(RQ, dtype=float).reshape(n, -1)
    r = RQ.shape[1]
    if s > n and (r == 0 or not np.any(RQ)):
        raise PreconditionError("RQ must bound dQ/dx on the region; got an empty/zero RQ with a nonlinear Q")
    if library is not None and region is not None and s > n:
        gap = rq_domination_gap(library, region, RQ, resolution=min(region.resolution, 101))
        if gap < -1e-12:
            raise PreconditionError(f"RQ RQ^T does not dominate dQ/dx^T dQ/dx on the region (min eig {gap:.3g})")
    p = lmi.LmiProblem("contractive")
    P, Y1, G2, consts = _parameterize(p, D)
    X1Y1 = D.X1 @ Y1
    top = X1Y1 + X1Y1.T + Omega
    if s > n:
        X1G2 = D.X1 @ G2
        blk = cp.bmat([
            [top, X1G2, P @ RQ],
            [X1G2.T, -np.eye(s - n), np.zeros((s - n, r))],
            [(P @ RQ).T, np.zeros((r, s - n)), -np.eye(r)],
        ])
    else:
        blk = top
    p.add_lmi(blk, 0.0, "contraction")
    p.add_lmi(-P, opts.strict_margin, "P_pos")
    sol = lmi.solve(p, opts)
    if not sol.ok:
        raise SynthesisInfeasible(f"contractive program failed: {sol.status} ({sol.solver_status})",
                                  status=sol.status)
    Pv, S, G, K = _recover(sol, D, consts)
    L = recover_L(D, K, richness_tol)
    beta = contraction_rate(S, Omega)
    return Controller(K=K, G=G, L=L, P=Pv, S=S, method=CONTRACTIVE, Omega=Omega,
                      Theta=beta * S, Phi=np.zeros((n, s - n)), beta=beta, region=region, RQ=RQ,
                      provenance=_provenance(D, opts, sol))


def _q_gram(lib: FunctionLibrary, X) -> np.ndarray:
    DQ = lib.q_jac(X)
    return np.einsum("kij,kil->kjl", DQ, DQ)


def estimate_rq(lib: FunctionLibrary, region: RegionBox, safety: float = 1.05,
                resolution: int | None = None) -> np.ndarray:
    """Diagonal RQ with RQ RQ^T >= dQ/dx^T dQ/dx at every grid point of ``region``.

    Each diagonal entry is the largest absolute row sum of the sampled Gram
    matrices (a Gershgorin bound), inflated by ``safety``.
    """
    if lib.s == lib.n:
        return np.zeros((lib.n, 0))
    M = _q_gram(lib, region.grid(resolution))
    if not np.all(np.isfinite(M)):
        raise InvalidArgument("Jacobian of Q is not finite on the region")
    d = np.abs(M).sum(axis=2).max(axis=0)
    return np.diag(np.sqrt(safety * d))


def rq_domination_gap(lib: FunctionLibrary, region: RegionBox, RQ, resolution: int | None = None) -> float:
    """min over the grid of lambda_min(RQ RQ^T - dQ/dx^T dQ/dx); >= 0 means RQ is valid there."""
    RQ = np.asarray(RQ, dtype=float).reshape(lib.n, -1)
    M = RQ @ RQ.T - _q_gram(lib, region.grid(resolution))
    return float(np.linalg.eigvalsh(M)[:, 0].min())


def recover_L(D: DataMatrices, K, richness_tol: float = 1e-8) -> np.ndarray:
    """Least-norm L with [K; 0] = [U0; Z0] L."""
    if not check_richness(D, richness_tol)["full_rank"]:
        raise PreconditionError("cannot solve for L: [U0; Z0] lacks full row rank (data not rich enough)")
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (D.m, D.s):
        raise InvalidArgument(f"K must be {D.m}x{D.s}")
    rhs = np.vstack([K, np.zeros((D.s, D.s))])
    return np.linalg.pinv(D.stacked) @ rhs


def schur_residual(ctrl: Controller, D: DataMatrices) -> float:
    """Largest eigenvalue of the Schur-complement form of the contraction LMI (in S coordinates)."""
    S = ctrl.S
    X1G1 = D.X1 @ ctrl.G1
    X1G2 = D.X1 @ ctrl.G2
    M = S @ X1G1 + X1G1.T @ S + S @ ctrl.Omega @ S + S @ X1G2 @ X1G2.T @ S
    if ctrl.RQ is not None:
        M = M + ctrl.RQ @ ctrl.RQ.T
    return lmi.max_eig(M)


def program_residual(ctrl: Controller, D: DataMatrices) -> float:
    """Largest eigenvalue of the synthesis LMI re-assembled from the returned (P, G)."""
    n, s = ctrl.n, ctrl.s
    X1Y1 = D.X1 @ ctrl.G1 @ ctrl.P
    top = X1Y1 + X1Y1.T + ctrl.Omega
    if ctrl.method == LINEARIZATION or s == n:
        return lmi.max_eig(top)
    X1G2 = D.X1 @ ctrl.G2
    PR = ctrl.P @ ctrl.RQ
    r = PR.shape[1]
    blk = np.block([[top, X1G2, PR],
                    [X1G2.T, -np.eye(s - n), np.zeros((s - n, r))],
                    [PR.T, np.zeros((r, s - n)), -np.eye(r)]])
    return lmi.max_eig(blk)


def contractivity_residuals(ctrl: Controller, D: DataMatrices, lib: FunctionLibrary, X) -> np.ndarray:
    """lambda_max((X1 G J)^T S + S X1 G J + beta S) at each row of X."""
    X1G = D.X1 @ ctrl.G
    J = lib.jac(np.atleast_2d(X))
    F = np.einsum("ij,kjl->kil", X1G, J)
    SF = np.einsum("ij,kjl->kil", ctrl.S, F)
    M = SF + SF.transpose(0, 2, 1) + (ctrl.beta or 0.0) * ctrl.S
    return np.linalg.eigvalsh(M)[:, -1]


def verify_closed_loop(ctrl: Controller, D: DataMatrices, lib: FunctionLibrary,
                       region: RegionBox | None = None, samples: int = 10_000, seed: int = 0,
                       radius: float = 0.1) -> dict:
    """Numerical evidence that the data-based closed loop behaves as designed."""
    n = ctrl.n
    X1G = D.X1 @ ctrl.G
    eig = np.linalg.eigvals(D.X1 @ ctrl.G1)
    stacked = D.stacked
    report = {
        "method": ctrl.method,
        "max_real_eig_X1G1": float(eig.real.max()),
        "hurwitz": bool(eig.real.max() < 0),
        "closed_loop_identity_residual": float(np.abs(np.vstack([ctrl.K, np.eye(ctrl.s)]) - stacked @ ctrl.G).max()),
        "L_residual": float(np.abs(np.vstack([ctrl.K, np.zeros((ctrl.s, ctrl.s))]) - stacked @ ctrl.L).max()),
        "program_residual": program_residual(ctrl, D),
        "beta": ctrl.beta,
    }
    if ctrl.method == CONTRACTIVE:
        report["schur_residual"] = schur_residual(ctrl, D)
        if region is not None:
            res = int(round(samples ** (1.0 / n)))
            X = region.grid(res)
            report["contractivity_residual"] = float(contractivity_residuals(ctrl, D, lib, X).max())
            report["contractivity_points"] = int(X.shape[0])
    else:
        rng = np.random.default_rng(seed)
        d = rng.normal(size=(samples, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = radius * rng.uniform(0, 1, size=(samples, 1)) ** (1.0 / n)
        X = d * np.maximum(r, 1e-6)
        Z = lib.eval(X)
        vdot = 2 * np.einsum("ki,ij,kj->k", X, ctrl.S @ X1G, Z)
        report["max_vdot_near_origin"] = float(vdot.max())
        report["max_vdot_ratio_near_origin"] = float((vdot / np.sum(X * X, axis=1)).max())
        report["vdot_negative"] = bool(np.all(vdot < 0))
    return report
