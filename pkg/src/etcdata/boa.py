"""Basin-of-attraction estimates as Lyapunov sublevel sets inside decrease regions."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateRegion, InvalidArgument
from .model import DataMatrices, FunctionLibrary, RegionBox
from .synthesis import Controller, sqrt_psd

V_STATE, V_LIBRARY, Z_FOOTNOTE, BOX, BALL, INTERSECTION = (
    "V_state", "V_library", "Z_footnote", "box", "ball", "intersection")


@dataclass(frozen=True, eq=False)
class SetPredicate:
    """A subset of R^n given by a defining inequality; ``contains`` is vectorised over rows."""

    kind: str
    params: dict = field(default_factory=dict)
    parts: tuple = ()

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        k, p = self.kind, self.params
        if k == INTERSECTION:
            out = np.ones(len(X), bool)
            for part in self.parts:
                out &= part.contains(X)
            return out
        if k == BOX:
            return np.all((X >= p["lower"]) & (X <= p["upper"]), axis=1)
        if k == BALL:
            return np.einsum("ij,ij->i", X, X) <= p["radius"] ** 2
        lib: FunctionLibrary = p["library"]
        quad = np.einsum("ij,jk,ik->i", X, p["Theta"], X)
        if k == Z_FOOTNOTE:
            Z = lib.eval(X)
            lhs = 2.0 * np.einsum("ij,jk,ik->i", X, p["SX1G"], Z)
            return lhs <= -quad
        Q = lib.q(X)
        val = -0.5 * quad + 2.0 * np.einsum("ij,jk,ik->i", X, p["Phi"], Q)
        if k == V_LIBRARY:
            val = val + p["eta"] * np.einsum("ij,ij->i", Q, Q)
        return val < 0.0

    def __call__(self, X) -> np.ndarray:
        return self.contains(X)


def v_state(ctrl: Controller, lib: FunctionLibrary) -> SetPredicate:
    """{x : -1/2 x'Theta x + 2 x'Phi Q(x) < 0}."""
    return SetPredicate(V_STATE, {"Theta": ctrl.Theta, "Phi": ctrl.Phi, "library": lib})


def v_library(ctrl: Controller, lib: FunctionLibrary, eta: float) -> SetPredicate:
    """{x : -1/2 x'Theta x + 2 x'Phi Q(x) + eta Q'Q < 0}."""
    if not eta > 0:
        raise InvalidArgument("eta must be positive")
    return SetPredicate(V_LIBRARY, {"Theta": ctrl.Theta, "Phi": ctrl.Phi, "eta": float(eta), "library": lib})


def z_set(ctrl: Controller, D: DataMatrices, lib: FunctionLibrary) -> SetPredicate:
    """{x : 2 x'S X1 G zeta(x) <= -x'Theta x}."""
    return SetPredicate(Z_FOOTNOTE, {"Theta": ctrl.Theta, "SX1G": ctrl.S @ D.X1 @ ctrl.G, "library": lib})


def box(region: RegionBox) -> SetPredicate:
    return SetPredicate(BOX, {"lower": region.lower, "upper": region.upper})


def ball(radius: float) -> SetPredicate:
    return SetPredicate(BALL, {"radius": float(radius)})


def intersection(*preds: SetPredicate) -> SetPredicate:
    return SetPredicate(INTERSECTION, {}, tuple(preds))


def membership(pred: SetPredicate, x) -> bool:
    return bool(pred.contains(np.asarray(x, dtype=float).reshape(1, -1))[0])


# -- sublevel search ------------------------------------------------------------

def unit_directions(n: int, samples: int | None = None, seed: int = 0) -> np.ndarray:
    """Uniform angular grid for n = 2, seeded random directions otherwise."""
    if n == 2:
        k = samples or 720
        th = 2 * np.pi * np.arange(k) / k
        return np.column_stack([np.cos(th), np.sin(th)])
    k = samples or 10_000
    d = np.random.default_rng(seed).standard_normal((k, n))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def ellipse_points(S, gamma: float, directions: np.ndarray) -> np.ndarray:
    """Points with x'Sx = gamma along the given unit directions (through S^{-1/2})."""
    Sih = np.linalg.inv(sqrt_psd(S))
    return np.sqrt(gamma) * directions @ Sih.T


def sublevel_accepts(S, pred: SetPredicate, gamma: float, directions: np.ndarray,
                     shells=(1.0, 0.9, 0.5)) -> bool:
    pts = np.vstack([ellipse_points(S, f * gamma, directions) for f in shells])
    pts = pts[np.linalg.norm(pts, axis=1) > 0]
    return bool(np.all(pred.contains(pts)))


def largest_sublevel(S, pred: SetPredicate, gamma_hi: float, tol: float | None = None,
                     boundary_samples: int | None = None, seed: int = 0) -> float:
    """Largest gamma in (0, gamma_hi] (to within tol) whose sampled sublevel set lies in ``pred``."""
    S = np.asarray(S, dtype=float)
    if np.linalg.eigvalsh(0.5 * (S + S.T))[0] <= 0:
        raise InvalidArgument("S must be positive definite")
    if not gamma_hi > 0:
        raise InvalidArgument("gamma_hi must be positive")
    tol = 1e-4 * gamma_hi if tol is None else tol
    dirs = unit_directions(S.shape[0], boundary_samples, seed)
    if sublevel_accepts(S, pred, gamma_hi, dirs):
        return float(gamma_hi)
    lo, hi = 0.0, float(gamma_hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if sublevel_accepts(S, pred, mid, dirs):
            lo = mid
        else:
            hi = mid
    if lo < tol or not sublevel_accepts(S, pred, lo, dirs):
        raise DegenerateRegion(f"no sublevel set with gamma >= {tol:g} fits in the {pred.kind} set")
    return lo


def default_gamma_hi(S, region: RegionBox) -> float:
    """Largest gamma whose sublevel set fits in the box."""
    w = np.minimum(-region.lower, region.upper)
    return float(np.min(w ** 2 / np.diag(np.linalg.inv(S))))


def bounding_box(S, gamma: float, resolution: int = 201) -> RegionBox:
    """Tight axis-aligned box around {x'Sx <= gamma}."""
    hw = np.sqrt(gamma * np.diag(np.linalg.inv(S)))
    return RegionBox.symmetric(hw, resolution)


@dataclass
class InclusionResult:
    holds: bool
    counterexample: np.ndarray | None = None
    checked: int = 0

    def __bool__(self):
        return self.holds


def set_inclusion_check(inner: SetPredicate, outer: SetPredicate, region: RegionBox,
                        resolution: int | None = None, with_origin: bool = True) -> InclusionResult:
    """Grid test of inner subset of outer (outer taken with the origin added) over the region."""
    X = region.grid(resolution)
    X = X[inner.contains(X)]
    ok = outer.contains(X)
    if with_origin:
        ok |= np.all(X == 0.0, axis=1)
    if np.all(ok):
        return InclusionResult(True, None, len(X))
    return InclusionResult(False, X[np.argmin(ok)].copy(), len(X))


# -- plot data ----------------------------------------------------------------------

def ellipse_polyline(S, gamma: float, samples: int = 361) -> np.ndarray:
    th = np.linspace(0.0, 2 * np.pi, samples)
    return ellipse_points(S, gamma, np.column_stack([np.cos(th), np.sin(th)]))


def radial_boundary(pred: SetPredicate, r_max: float, samples: int = 361, radial: int = 400,
                    tol: float = 1e-6) -> np.ndarray:
    """First exit of ``pred`` along rays from the origin (n = 2), capped at r_max."""
    th = np.linspace(0.0, 2 * np.pi, samples)
    dirs = np.column_stack([np.cos(th), np.sin(th)])
    radii = np.linspace(r_max / radial, r_max, radial)
    out = np.empty_like(dirs)
    for i, d in enumerate(dirs):
        inside = pred.contains(radii[:, None] * d)
        if inside.all():
            out[i] = r_max * d
            continue
        j = int(np.argmin(inside))
        lo = radii[j - 1] if j > 0 else 0.0
        hi = radii[j]
        while hi - lo > tol * r_max:
            mid = 0.5 * (lo + hi)
            if pred.contains(mid * d)[0]:
                lo = mid
            else:
                hi = mid
        out[i] = lo * d
    return out


def write_polyline(path, P: np.ndarray) -> None:
    np.savetxt(path, P, delimiter=",", header="x1,x2", comments="", fmt="%.17g")


def write_polylines(directory, S, gamma: float, pred: SetPredicate, r_max: float, tag: str) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    a, b = d / f"{tag}_sublevel.csv", d / f"{tag}_set.csv"
    write_polyline(a, ellipse_polyline(S, gamma))
    write_polyline(b, radial_boundary(pred, r_max))
    return [a, b]
