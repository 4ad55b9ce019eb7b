"""Function libraries, the ground-truth plant, data matrices and regions.

A library is ``zeta(x) = (x, Q(x))``: the identity block is always first and
the nonlinear part ``Q`` is a list of analytic terms. Each term is a product of
factors ``base(x_c) ** p`` with ``base`` one of identity, sin, cos, so both the
values and the Jacobian are exact.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

POW, SIN, COS = 0, 1, 2
_BASE_NAMES = {POW: "x", SIN: "sin", COS: "cos"}
_BASE_CODES = {"pow": POW, "sin": SIN, "cos": COS}


@dataclass(frozen=True)
class Factor:
    base: int
    coordinate: int
    power: int = 1

    def __str__(self):
        arg = f"x{self.coordinate + 1}"
        core = arg if self.base == POW else f"{_BASE_NAMES[self.base]}({arg})"
        return core if self.power == 1 else f"{core}^{self.power}"


@dataclass(frozen=True)
class Term:
    factors: tuple[Factor, ...]

    def __str__(self):
        return "*".join(str(f) for f in self.factors) or "1"

    @classmethod
    def from_descriptor(cls, desc: dict, n: int) -> "Term":
        kind = desc.get("kind")
        if kind == "monomial":
            exps = list(desc["exponents"])
            if len(exps) != n or any(int(e) < 0 for e in exps):
                raise InvalidArgument(f"monomial exponents must be {n} non-negative integers, got {exps}")
            factors = tuple(Factor(POW, i, int(e)) for i, e in enumerate(exps) if int(e) > 0)
        elif kind in ("sin", "cos"):
            c = int(desc["coordinate"])
            if not 0 <= c < n:
                raise InvalidArgument(f"coordinate {c} out of range for n={n}")
            factors = (Factor(_BASE_CODES[kind], c, int(desc.get("power", 1))),)
        elif kind == "product":
            factors = tuple(f for d in desc["factors"] for f in cls.from_descriptor(d, n).factors)
        else:
            raise InvalidArgument(f"unknown term kind {kind!r}")
        return cls(factors)

    def to_descriptor(self, n: int) -> dict:
        if all(f.base == POW for f in self.factors):
            exps = [0] * n
            for f in self.factors:
                exps[f.coordinate] += f.power
            return {"kind": "monomial", "exponents": exps}
        if len(self.factors) == 1:
            f = self.factors[0]
            d = {"kind": _BASE_NAMES[f.base], "coordinate": f.coordinate}
            if f.power != 1:
                d["power"] = f.power
            return d
        return {"kind": "product", "factors": [Term((f,)).to_descriptor(n) for f in self.factors]}


def _factor_value(f: Factor, X):
    v = X[:, f.coordinate]
    if f.base == SIN:
        v = np.sin(v)
    elif f.base == COS:
        v = np.cos(v)
    return v ** f.power


def _factor_derivative(f: Factor, X):
    v = X[:, f.coordinate]
    if f.base == POW:
        return f.power * v ** (f.power - 1)
    if f.base == SIN:
        return f.power * np.sin(v) ** (f.power - 1) * np.cos(v)
    return -f.power * np.cos(v) ** (f.power - 1) * np.sin(v)


@dataclass(frozen=True)
class FunctionLibrary:
    """Known basis ``zeta(x) = (x, Q(x))``.

    ``allow_linear_q`` admits nonlinear terms whose Jacobian at the origin is
    nonzero (e.g. ``sin x1``). Such terms break ``|Q(x)|/|x| -> 0`` and are
    rejected unless explicitly allowed.
    """

    n: int
    terms: tuple[Term, ...] = ()
    name: str = ""
    allow_linear_q: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgument("state dimension must be positive")
        for t in self.terms:
            for f in t.factors:
                if not 0 <= f.coordinate < self.n or f.power < 1:
                    raise InvalidArgument(f"bad factor {f} in term {t}")
        z0 = self.eval(np.zeros(self.n))
        if np.any(z0 != 0.0):
            bad = [str(t) for t, v in zip(self.terms, z0[self.n:]) if v != 0.0]
            raise InvalidArgument(f"library terms must vanish at the origin: {bad}")
        if not self.allow_linear_q and self.s > self.n:
            dq0 = self.jac(np.zeros(self.n))[self.n:]
            if np.any(np.abs(dq0) > 0):
                bad = [str(t) for t, row in zip(self.terms, dq0) if np.any(row != 0)]
                raise InvalidArgument(
                    f"terms {bad} have a nonzero linear part at the origin; "
                    "shift them or pass allow_linear_q=True")

    @property
    def s(self) -> int:
        return self.n + len(self.terms)

    @property
    def higher_order(self) -> bool:
        """True when Q has zero Jacobian at the origin."""
        if self.s == self.n:
            return True
        return not np.any(self.jac(np.zeros(self.n))[self.n:])

    def labels(self) -> list[str]:
        return [f"x{i + 1}" for i in range(self.n)] + [str(t) for t in self.terms]

    def _as_batch(self, x):
        X = np.asarray(x, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.ndim != 2 or X.shape[1] != self.n:
            raise InvalidArgument(f"expected state(s) of dimension {self.n}, got shape {np.shape(x)}")
        return X, single

    def eval(self, x) -> np.ndarray:
        """zeta at a state (n,) or a batch of states (N, n)."""
        X, single = self._as_batch(x)
        Z = np.empty((X.shape[0], self.s))
        Z[:, :self.n] = X
        for j, t in enumerate(self.terms):
            col = np.ones(X.shape[0])
            for f in t.factors:
                col = col * _factor_value(f, X)
            Z[:, self.n + j] = col
        return Z[0] if single else Z

    def jac(self, x) -> np.ndarray:
        """d zeta / dx, shape (s, n) or (N, s, n)."""
        X, single = self._as_batch(x)
        N = X.shape[0]
        J = np.zeros((N, self.s, self.n))
        J[:, np.arange(self.n), np.arange(self.n)] = 1.0
        for j, t in enumerate(self.terms):
            vals = [_factor_value(f, X) for f in t.factors]
            for k, f in enumerate(t.factors):
                prod = _factor_derivative(f, X)
                for i, v in enumerate(vals):
                    if i != k:
                        prod = prod * v
                J[:, self.n + j, f.coordinate] += prod
        return J[0] if single else J

    def q(self, x) -> np.ndarray:
        z = self.eval(x)
        return z[..., self.n:]

    def q_jac(self, x) -> np.ndarray:
        return self.jac(x)[..., self.n:, :]

    def encode(self):
        """Dense arrays (base, coordinate, power) per term and factor; base -1 pads."""
        width = max((len(t.factors) for t in self.terms), default=1) or 1
        base = -np.ones((len(self.terms), width), dtype=np.int64)
        coord = np.zeros((len(self.terms), width), dtype=np.int64)
        power = np.zeros((len(self.terms), width), dtype=np.int64)
        for j, t in enumerate(self.terms):
            for k, f in enumerate(t.factors):
                base[j, k], coord[j, k], power[j, k] = f.base, f.coordinate, f.power
        return base, coord, power

    def to_config(self) -> dict:
        return {
            "n": self.n,
            "terms": [t.to_descriptor(self.n) for t in self.terms],
            "allow_linear_q": self.allow_linear_q,
        }

    @classmethod
    def from_config(cls, cfg: dict, name: str = "") -> "FunctionLibrary":
        n = int(cfg["n"])
        terms = [Term.from_descriptor(d, n) for d in cfg.get("terms", [])]
        # a leading identity block in the descriptor list is redundant
        ident = [Term((Factor(POW, i, 1),)) for i in range(n)]
        if terms[:n] == ident:
            terms = terms[n:]
        return cls(n, tuple(terms), name=name, allow_linear_q=bool(cfg.get("allow_linear_q", False)))


def monomial_library(n: int, degree: int, min_degree: int = 2, name: str = "") -> FunctionLibrary:
    """All monomials of total degree in [min_degree, degree], graded order."""
    terms = []
    for d in range(min_degree, degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), d):
            exps = [combo.count(i) for i in range(n)]
            terms.append(Term(tuple(Factor(POW, i, e) for i, e in enumerate(exps) if e)))
    return FunctionLibrary(n, tuple(terms), name=name)


def eval_library(lib: FunctionLibrary, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (lib.n,):
        raise InvalidArgument(f"x must have shape ({lib.n},), got {x.shape}")
    return lib.eval(x)


def eval_jacobian(lib: FunctionLibrary, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (lib.n,):
        raise InvalidArgument(f"x must have shape ({lib.n},), got {x.shape}")
    return lib.jac(x)


def q_part(lib: FunctionLibrary, x) -> np.ndarray:
    return eval_library(lib, x)[lib.n:]


@dataclass(frozen=True)
class GroundTruthSystem:
    """The plant ``xdot = A zeta(x) + B u``. Synthesis code never reads A or B."""

    A: np.ndarray
    B: np.ndarray
    library: FunctionLibrary
    name: str = ""

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(self.library.n, -1)
        if A.shape != (self.library.n, self.library.s):
            raise InvalidArgument(f"A must be {self.library.n}x{self.library.s}, got {A.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self):
        return self.library.n

    @property
    def m(self):
        return self.B.shape[1]

    def rhs(self, x, u) -> np.ndarray:
        return self.A @ self.library.eval(x) + self.B @ np.atleast_1d(u)


@dataclass(frozen=True)
class DataMatrices:
    U0: np.ndarray
    X0: np.ndarray
    Z0: np.ndarray
    X1: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        mats = {}
        for k in ("U0", "X0", "Z0", "X1"):
            M = np.atleast_2d(np.asarray(getattr(self, k), dtype=float))
            M.setflags(write=False)
            mats[k] = M
            object.__setattr__(self, k, M)
        T = {M.shape[1] for M in mats.values()}
        if len(T) != 1:
            raise InvalidArgument(f"column counts disagree: { {k: M.shape for k, M in mats.items()} }")
        if mats["X1"].shape[0] != mats["X0"].shape[0]:
            raise InvalidArgument("X0 and X1 must have the same number of rows")
        n = mats["X0"].shape[0]
        if mats["Z0"].shape[0] < n or not np.array_equal(mats["Z0"][:n], mats["X0"]):
            raise InvalidArgument("top n rows of Z0 must equal X0")

    @property
    def T(self):
        return self.X0.shape[1]

    @property
    def n(self):
        return self.X0.shape[0]

    @property
    def m(self):
        return self.U0.shape[0]

    @property
    def s(self):
        return self.Z0.shape[0]

    @property
    def stacked(self) -> np.ndarray:
        return np.vstack([self.U0, self.Z0])

    def consistent_with(self, lib: FunctionLibrary, atol=1e-12) -> bool:
        return lib.s == self.s and np.allclose(lib.eval(self.X0.T).T, self.Z0, rtol=0, atol=atol)

    @staticmethod
    def concat(parts: list["DataMatrices"]) -> "DataMatrices":
        if not parts:
            raise InvalidArgument("nothing to concatenate")
        return DataMatrices(*(np.hstack([getattr(p, k) for p in parts]) for k in ("U0", "X0", "Z0", "X1")),
                            meta={"experiments": [p.meta for p in parts]})


@dataclass(frozen=True)
class RegionBox:
    lower: np.ndarray
    upper: np.ndarray
    resolution: int = 201

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise InvalidArgument("lower and upper must have the same length")
        if not np.all(lo < 0) or not np.all(hi > 0):
            raise InvalidArgument("region must contain the origin in its interior (lower < 0 < upper)")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidArgument("region must be bounded")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "resolution", int(self.resolution))

    @classmethod
    def symmetric(cls, half_widths, resolution=201):
        h = np.atleast_1d(np.asarray(half_widths, dtype=float))
        return cls(-h, h, resolution)

    @property
    def n(self):
        return self.lower.size

    def grid(self, resolution: int | None = None) -> np.ndarray:
        r = resolution or self.resolution
        axes = [np.linspace(lo, hi, r) for lo, hi in zip(self.lower, self.upper)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.n)

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.all((X >= self.lower) & (X <= self.upper), axis=1)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "resolution": self.resolution}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionBox":
        return cls(d["lower"], d["upper"], d.get("resolution", 201))
