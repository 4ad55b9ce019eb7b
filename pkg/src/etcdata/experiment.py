"""Offline data collection from the ground-truth plant."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ExperimentDiverged, InvalidArgument
from .model import DataMatrices, GroundTruthSystem


@dataclass(frozen=True)
class InputSignal:
    """Piecewise-linear input through ``values[k]`` at ``breakpoints[k]``."""

    breakpoints: np.ndarray
    values: np.ndarray  # (K, m)

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float).reshape(bp.size, -1)
        if bp.size < 2 or np.any(np.diff(bp) <= 0):
            raise InvalidArgument("breakpoints must be strictly increasing (at least two)")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @property
    def m(self):
        return self.values.shape[1]

    def __call__(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.breakpoints, self.values[:, j]) for j in range(self.m)])


@dataclass(frozen=True)
class ExperimentConfig:
    duration: float
    sample_period: float
    input_range: tuple  # (lo, hi) or one pair per input channel
    x0_range: tuple  # one (lo, hi) pair per state
    rng_seed: int = 0
    integrator_step: float | None = None
    blowup_norm: float = 1e6

    def __post_init__(self):
        if not self.duration > 0:
            raise InvalidArgument("duration must be positive")
        if not 0 < self.sample_period <= self.duration:
            raise InvalidArgument("need 0 < sample_period <= duration")
        if self.integrator_step is None:
            object.__setattr__(self, "integrator_step", self.sample_period / 100)
        if not 0 < self.integrator_step <= self.sample_period / 10 * (1 + 1e-12):
            raise InvalidArgument("integrator_step must be in (0, sample_period/10]")
        ratio = self.sample_period / self.integrator_step
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise InvalidArgument("sample_period must be an integer multiple of integrator_step")

    def input_bounds(self, m: int) -> np.ndarray:
        r = np.asarray(self.input_range, dtype=float)
        r = np.tile(r, (m, 1)) if r.ndim == 1 else r
        if r.shape != (m, 2):
            raise InvalidArgument(f"input_range must be a pair or {m} pairs")
        if np.any(r[:, 0] > r[:, 1]):
            raise InvalidArgument("empty input range (lo > hi)")
        return r

    def state_bounds(self, n: int) -> np.ndarray:
        r = np.asarray(self.x0_range, dtype=float)
        r = np.tile(r, (n, 1)) if r.ndim == 1 else r
        if r.shape != (n, 2) or np.any(r[:, 0] > r[:, 1]):
            raise InvalidArgument(f"x0_range must be a pair or {n} non-empty pairs")
        return r

    @property
    def n_samples(self) -> int:
        return int(round(self.duration / self.sample_period))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_range"] = np.asarray(self.input_range, dtype=float).tolist()
        d["x0_range"] = np.asarray(self.x0_range, dtype=float).tolist()
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _draw(cfg: ExperimentConfig, m: int, n: int | None = None):
    # input samples first, then the initial state, from one seeded stream
    rng = np.random.default_rng(cfg.rng_seed)
    bounds = cfg.input_bounds(m)
    k = cfg.n_samples + 1
    bp = cfg.sample_period * np.arange(k)
    vals = rng.uniform(bounds[:, 0], bounds[:, 1], size=(k, m))
    x0 = None
    if n is not None:
        sb = cfg.state_bounds(n)
        x0 = rng.uniform(sb[:, 0], sb[:, 1])
    return InputSignal(bp, vals), x0


def generate_input(cfg: ExperimentConfig, m: int = 1) -> InputSignal:
    return _draw(cfg, m)[0]


def rk4_step(f, t, x, h):
    k1 = f(t, x)
    k2 = f(t + h / 2, x + h / 2 * k1)
    k3 = f(t + h / 2, x + h / 2 * k2)
    k4 = f(t + h, x + h * k3)
    return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def collect_data(sys: GroundTruthSystem, cfg: ExperimentConfig, x0=None) -> DataMatrices:
    """Run one experiment; derivatives are read off the true right-hand side."""
    signal, x0_drawn = _draw(cfg, sys.m, sys.n)
    x = np.asarray(x0_drawn if x0 is None else x0, dtype=float).copy()
    T = cfg.n_samples
    sub = int(round(cfg.sample_period / cfg.integrator_step))
    h = cfg.sample_period / sub

    def f(t, x):
        return sys.rhs(x, signal(t))

    U0 = np.empty((sys.m, T))
    X0 = np.empty((sys.n, T))
    for k in range(T):
        t_k = k * cfg.sample_period
        U0[:, k] = signal(t_k)
        X0[:, k] = x
        if k == T - 1:
            break
        for i in range(sub):
            x = rk4_step(f, t_k + i * h, x, h)
            if not np.all(np.isfinite(x)) or np.linalg.norm(x) > cfg.blowup_norm:
                raise ExperimentDiverged(
                    f"state norm exceeded {cfg.blowup_norm:g} at t={t_k + (i + 1) * h:.4g}; "
                    "try a smaller input range or a different seed")
    Z0 = sys.library.eval(X0.T).T
    X1 = sys.A @ Z0 + sys.B @ U0
    return DataMatrices(U0, X0, Z0, X1, meta={"seed": cfg.rng_seed, "config": cfg.to_dict(),
                                               "config_hash": cfg.digest(), "x0": x0_drawn.tolist()})


def collect_many(sys: GroundTruthSystem, cfgs: list[ExperimentConfig]) -> DataMatrices:
    return DataMatrices.concat([collect_data(sys, c) for c in cfgs])


def check_richness(D: DataMatrices, tol: float = 1e-8) -> dict:
    """Rank test of [U0; Z0] relative to its largest singular value."""
    sv = np.linalg.svd(D.stacked, compute_uv=False)
    k = D.m + D.s
    full = len(sv) >= k and sv[0] > 0 and sv[k - 1] > tol * sv[0]
    return {"full_rank": bool(full), "singular_values": sv.tolist()}


# -- CSV bundle ---------------------------------------------------------------

_BUNDLE = (("U0", "u"), ("X0", "x"), ("Z0", "z"), ("X1", "dx"))


def data_hash(D: DataMatrices) -> str:
    h = hashlib.sha256()
    for name, _ in _BUNDLE:
        h.update(np.ascontiguousarray(getattr(D, name)).tobytes())
    return h.hexdigest()


def save_bundle(D: DataMatrices, directory) -> Path:
    """One CSV per matrix (a row per sample) plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, prefix in _BUNDLE:
        M = getattr(D, name)
        header = ",".join(f"{prefix}{i + 1}" for i in range(M.shape[0]))
        np.savetxt(d / f"{name}.csv", M.T, delimiter=",", header=header, comments="", fmt="%.17g")
    manifest = {
        "dims": {"n": D.n, "m": D.m, "s": D.s, "T": D.T},
        "seed": D.meta.get("seed"),
        "config_hash": D.meta.get("config_hash"),
        "config": D.meta.get("config"),
        "data_hash": data_hash(D),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_bundle(directory) -> DataMatrices:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    mats = {}
    for name, _ in _BUNDLE:
        M = np.loadtxt(d / f"{name}.csv", delimiter=",", skiprows=1, ndmin=2)
        mats[name] = M.T
    D = DataMatrices(**mats, meta={"seed": manifest.get("seed"), "config": manifest.get("config"),
                                   "config_hash": manifest.get("config_hash")})
    if manifest["dims"]["T"] != D.T:
        raise InvalidArgument("manifest/sample count mismatch")
    return D
