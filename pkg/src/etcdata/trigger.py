"""Triggering-threshold design and minimum inter-event time constants."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag
from scipy.optimize import minimize_scalar

from . import lmi
from .errors import InternalInfeasible, InvalidArgument
from .model import DataMatrices, FunctionLibrary, RegionBox
from .synthesis import Controller

ERROR_STATE = "error-state"
ERROR_LIBRARY = "error-library"


@dataclass
class TriggerPolicy:
    kind: str
    sigma: float
    mu: float
    eta: float | None = None
    tau: float | None = None
    constants: dict = field(default_factory=dict)
    region: RegionBox | None = None
    sigma_cap: float = 10.0
    lmi_residual: float | None = None
    route: str = "lmi"

    def __post_init__(self):
        if self.kind not in (ERROR_STATE, ERROR_LIBRARY):
            raise InvalidArgument(f"unknown trigger kind {self.kind!r}")
        if not self.sigma > 0:
            raise InvalidArgument("sigma must be positive")

    @property
    def miet_constant(self) -> float | None:
        key = "ell" if self.kind == ERROR_STATE else "omega"
        return self.constants.get(key)

    def with_constants(self, constants: dict, region: RegionBox | None) -> "TriggerPolicy":
        c = constants["ell"] if self.kind == ERROR_STATE else constants["omega"]
        return TriggerPolicy(self.kind, self.sigma, self.mu, self.eta, miet(self.sigma, c),
                             dict(constants), region, self.sigma_cap, self.lmi_residual, self.route)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "mu": self.mu, "eta": self.eta, "tau": self.tau,
                "constants": self.constants, "sigma_cap": self.sigma_cap, "lmi_residual": self.lmi_residual, "route": self.route,
                "region": None if self.region is None else self.region.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerPolicy":
        return cls(d["kind"], d["sigma"], d["mu"], d.get("eta"), d.get("tau"), d.get("constants", {}),
                   None if d.get("region") is None else RegionBox.from_dict(d["region"]),
                   d.get("sigma_cap", 10.0), d.get("lmi_residual"), d.get("route", "lmi"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "TriggerPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _coupling(ctrl: Controller, D: DataMatrices) -> np.ndarray:
    if D.X1.shape[1] != ctrl.L.shape[0] or ctrl.S.shape[0] != D.n:
        raise InvalidArgument("controller and data dimensions disagree")
    return ctrl.S @ D.X1 @ ctrl.L


def build_M(ctrl: Controller, D: DataMatrices) -> np.ndarray:
    """[[-Theta/2, S X1 L], [(S X1 L)^T, 0]] of size n+s."""
    C = _coupling(ctrl, D)
    s = C.shape[1]
    M = np.block([[-0.5 * ctrl.Theta, C], [C.T, np.zeros((s, s))]])
    return 0.5 * (M + M.T)


def build_Mbar(ctrl: Controller, D: DataMatrices, eta: float) -> np.ndarray:
    """Library-error analogue of ``build_M`` with an extra -eta I block on Q; size 2s."""
    if not eta > 0:
        raise InvalidArgument("eta must be positive")
    C = _coupling(ctrl, D)
    n, s = C.shape
    W = block_diag(0.5 * ctrl.Theta, eta * np.eye(s - n))
    Cbar = np.vstack([C, np.zeros((s - n, s))])
    M = np.block([[-W, Cbar], [Cbar.T, np.zeros((s, s))]])
    return 0.5 * (M + M.T)


def psi(sigma: float, k: int, s: int) -> np.ndarray:
    """diag(-sigma^2 I_k, I_s)."""
    return np.diag(np.r_[-sigma ** 2 * np.ones(k), np.ones(s)])


def sigma_sq_for_mu(M: np.ndarray, k: int, mu: float) -> float:
    """Largest sigma^2 with mu M - psi(sigma) <= 0 at fixed mu (Schur complement on the -I block)."""
    W = -M[:k, :k]
    C = M[:k, k:]
    return lmi.min_eig(mu * W - mu ** 2 * C @ C.T)


def _best_mu_1d(M: np.ndarray, k: int, mu_bounds) -> float:
    """Maximise the concave map mu -> lambda_min(mu W - mu^2 C C^T) on a log-scale bracket."""
    lo, hi = np.log(mu_bounds[0]), np.log(mu_bounds[1])
    grid = np.linspace(lo, hi, 241)
    vals = [sigma_sq_for_mu(M, k, np.exp(g)) for g in grid]
    i = int(np.argmax(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(lambda g: -sigma_sq_for_mu(M, k, np.exp(g)), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-12})
    return float(np.exp(res.x)) if -res.fun >= vals[i] else float(np.exp(grid[i]))


def _design(M: np.ndarray, k: int, sigma_cap: float, opts, mu_bounds):
    """Return (mu, sigma, residual, route).

    The LMI is solved on ``M / ||M||`` for conditioning; sigma is then set to
    the exact largest value admissible at the returned mu.
    """
    s = M.shape[0] - k
    opts = opts or lmi.SolverOptions()
    scale = max(float(np.linalg.norm(M, 2)), 1e-300)
    Mn = M / scale
    mu_lo, mu_hi = mu_bounds
    p = lmi.LmiProblem("trigger")
    nu = p.variable("mu")
    s2 = p.variable("sigma2")
    E_k = np.diag(np.r_[np.ones(k), np.zeros(s)])
    E_s = np.diag(np.r_[np.zeros(k), np.ones(s)])
    p.add_lmi(nu * Mn + s2 * E_k - E_s, 0.0, "trigger")
    p.add_lmi(mu_lo * scale - nu, 0.0, "mu_lo")
    p.add_lmi(nu - mu_hi * scale, 0.0, "mu_hi")
    p.add_lmi(-s2, 0.0, "sigma2_pos")
    p.add_lmi(s2 - sigma_cap ** 2, 0.0, "sigma2_cap")
    p.maximize(s2)
    sol = lmi.solve(p, opts)
    route = "lmi"
    mu_v = None
    if "mu" in sol.assignment and sol.status in (lmi.OPTIMAL, lmi.NUMERICAL_FAILURE):
        mu_v = float(np.clip(sol["mu"] / scale, mu_lo, mu_hi))
        if not sigma_sq_for_mu(M, k, mu_v) > 0:
            mu_v = None
    if mu_v is None:
        # the LMI is feasible in theory; fall back to the exact scalar problem
        route = f"scalar ({sol.status})"
        mu_v = _best_mu_1d(M, k, mu_bounds)
    s2_v = min(sigma_sq_for_mu(M, k, mu_v), sigma_cap ** 2)
    if not s2_v > 0:
        raise InternalInfeasible(f"no positive sigma found (LMI status {sol.status})", dump=p.dump())
    sigma = float(np.sqrt(s2_v))
    resid = lmi.max_eig(mu_v * M - psi(sigma, k, s))
    return mu_v, sigma, resid, route


def design_error_state(ctrl: Controller, D: DataMatrices, sigma_cap: float = 10.0,
                       opts: lmi.SolverOptions | None = None, mu_bounds=(1e-9, 1e6),
                       lib: FunctionLibrary | None = None, region: RegionBox | None = None,
                       **const_kw) -> TriggerPolicy:
    """Maximise sigma subject to mu M - Psi(sigma) <= 0; tau is filled in when lib and region are given."""
    M = build_M(ctrl, D)
    mu, sigma, resid, route = _design(M, D.n, sigma_cap, opts, mu_bounds)
    pol = TriggerPolicy(ERROR_STATE, sigma, mu, None, None, {}, None, sigma_cap, resid, route)
    if lib is not None and region is not None:
        pol = pol.with_constants(miet_constants(ctrl, D, lib, region, **const_kw), region)
    return pol


def design_error_library(ctrl: Controller, D: DataMatrices, eta: float = 0.1, sigma_cap: float = 10.0,
                         opts: lmi.SolverOptions | None = None, mu_bounds=(1e-9, 1e6),
                         lib: FunctionLibrary | None = None, region: RegionBox | None = None,
                         **const_kw) -> TriggerPolicy:
    M = build_Mbar(ctrl, D, eta)
    mu, sigma, resid, route = _design(M, D.s, sigma_cap, opts, mu_bounds)
    pol = TriggerPolicy(ERROR_LIBRARY, sigma, mu, eta, None, {}, None, sigma_cap, resid, route)
    if lib is not None and region is not None:
        pol = pol.with_constants(miet_constants(ctrl, D, lib, region, **const_kw), region)
    return pol


def region_samples(region: RegionBox, resolution: int = 201, n_random: int = 10_000, seed: int = 0):
    rng = np.random.default_rng(seed)
    rnd = rng.uniform(region.lower, region.upper, size=(n_random, region.n))
    return np.vstack([region.grid(resolution), rnd])


def miet_constants(ctrl: Controller, D: DataMatrices, lib: FunctionLibrary, region: RegionBox,
                   resolution: int = 201, n_random: int = 10_000, seed: int = 0,
                   inflation: float = 1.02, exclusion: float = 1e-6) -> dict:
    """ell1, ell2, ell, omega over ``region`` from sampled sups (inflated) and data norms."""
    if lib.n != region.n:
        raise InvalidArgument("region dimension does not match the library")
    X = region_samples(region, resolution, n_random, seed)
    jn = np.linalg.norm(lib.jac(X), ord=2, axis=(1, 2))
    ell1 = max(1.0, inflation * float(jn.max()))
    nG = float(np.linalg.norm(D.X1 @ ctrl.G, 2))
    nL = float(np.linalg.norm(D.X1 @ ctrl.L, 2))
    ell2 = ell1 * max(nG, nL)
    xn = np.linalg.norm(X, axis=1)
    keep = xn > exclusion
    ratio = np.linalg.norm(lib.eval(X[keep]), axis=1) / xn[keep]
    zeta_ratio = max(1.0, inflation * float(ratio.max()) if ratio.size else 1.0)
    return {"ell1": ell1, "ell2": ell2, "omega": ell2, "ell": ell2 * zeta_ratio,
            "zeta_ratio": zeta_ratio, "norm_X1G": nG, "norm_X1L": nL, "region": region.to_dict()}


def miet(sigma: float, c: float) -> float:
    """sigma / (c (1 + sigma))."""
    if not (sigma > 0 and c > 0):
        raise InvalidArgument("sigma and c must be positive")
    return sigma / (c * (1.0 + sigma))
