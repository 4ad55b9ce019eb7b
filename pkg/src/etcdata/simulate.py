"""Event-triggered closed-loop simulation of the true plant.

The held input ``u = K zeta(x(t_k))`` is applied between events; an event
fires when ``|zeta(x(t_k)) - zeta(x(t))|`` reaches ``sigma |x(t)|`` (error-state)
or ``sigma |zeta(x(t))|`` (error-library). Event times are located by bisection
on the RK4 step length.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from .errors import InvalidArgument, RunawayEvents, SimulationDiverged, UndefinedResult
from .model import GroundTruthSystem
from .synthesis import Controller
from .trigger import ERROR_STATE, TriggerPolicy

ZERO_STATE = 1e-12
_OK, _DIVERGED, _RUNAWAY = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    x0: tuple
    t_final: float = 10.0
    integrator_step: float = 1e-3
    event_tol: float = 1e-10
    blowup_norm: float = 1e6
    record_dt: float = 1e-2

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.ravel(self.x0)))
        for name in ("t_final", "integrator_step", "event_tol", "blowup_norm", "record_dt"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        if not self.event_tol < self.integrator_step:
            raise InvalidArgument("event_tol must be smaller than integrator_step")

    def to_dict(self) -> dict:
        return dict(self.__dict__, x0=list(self.x0))


@dataclass
class SimTrace:
    times: np.ndarray
    states: np.ndarray  # (N, n)
    inputs: np.ndarray  # (N, m)
    error_norm: np.ndarray
    threshold: np.ndarray
    lyapunov: np.ndarray
    event_flag: np.ndarray  # rows taken at an event instant (left limits)
    events: np.ndarray
    kind: str
    sigma: float
    tau: float | None
    step: float
    meta: dict = field(default_factory=dict)

    @property
    def inter_event(self) -> np.ndarray:
        return np.diff(self.events)

    @property
    def final_norm(self) -> float:
        return float(np.linalg.norm(self.states[-1]))

    def summary(self) -> dict:
        ie = self.inter_event
        return {
            "kind": self.kind, "sigma": self.sigma, "tau": self.tau, "step": self.step,
            "event_count": int(len(self.events)),
            "min_inter_event": float(ie.min()) if ie.size else None,
            "mean_inter_event": float(ie.mean()) if ie.size else None,
            "final_norm": self.final_norm,
            "threshold_violation": threshold_violation(self),
            **self.meta,
        }

    def to_csv(self, path) -> None:
        n, m = self.states.shape[1], self.inputs.shape[1]
        cols = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]
        cols += ["e_norm", "threshold", "V", "event_flag"]
        data = np.column_stack([self.times, self.states, self.inputs, self.error_norm, self.threshold,
                                self.lyapunov, self.event_flag.astype(float)])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


# -- compiled kernel ----------------------------------------------------------

@nb.njit(cache=True, nogil=True, inline="always")
def _zeta(x, base, coord, power, out):
    n = x.shape[0]
    for i in range(n):
        out[i] = x[i]
    for j in range(base.shape[0]):
        v = 1.0
        for k in range(base.shape[1]):
            b = base[j, k]
            if b < 0:
                break
            a = x[coord[j, k]]
            if b == 1:
                a = np.sin(a)
            elif b == 2:
                a = np.cos(a)
            p = power[j, k]
            f = 1.0
            for _ in range(p):
                f *= a
            v *= f
        out[n + j] = v


@nb.njit(cache=True, nogil=True, inline="always")
def _rhs(x, A, bu, base, coord, power, z, out):
    _zeta(x, base, coord, power, z)
    for i in range(A.shape[0]):
        acc = bu[i]
        for j in range(A.shape[1]):
            acc += A[i, j] * z[j]
        out[i] = acc


@nb.njit(cache=True, nogil=True, inline="always")
def _rk4(x, h, A, bu, base, coord, power, z, k1, k2, k3, k4, tmp, out):
    n = x.shape[0]
    _rhs(x, A, bu, base, coord, power, z, k1)
    for i in range(n):
        tmp[i] = x[i] + 0.5 * h * k1[i]
    _rhs(tmp, A, bu, base, coord, power, z, k2)
    for i in range(n):
        tmp[i] = x[i] + 0.5 * h * k2[i]
    _rhs(tmp, A, bu, base, coord, power, z, k3)
    for i in range(n):
        tmp[i] = x[i] + h * k3[i]
    _rhs(tmp, A, bu, base, coord, power, z, k4)
    for i in range(n):
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@nb.njit(cache=True, nogil=True, inline="always")
def _gap(x, zk, sigma, lib_thr, base, coord, power, z):
    """Return (|e|, threshold) at x for the held library sample zk."""
    _zeta(x, base, coord, power, z)
    e2 = 0.0
    r2 = 0.0
    n = x.shape[0]
    for i in range(z.shape[0]):
        d = zk[i] - z[i]
        e2 += d * d
        if lib_thr or i < n:
            r2 += z[i] * z[i]
    return np.sqrt(e2), sigma * np.sqrt(r2)


@nb.njit(cache=True, nogil=True, inline="always")
def _norm(x):
    acc = 0.0
    for i in range(x.shape[0]):
        acc += x[i] * x[i]
    return np.sqrt(acc)


@nb.njit(cache=True, nogil=True)
def _grow(a, size):
    out = np.empty((size,) + a.shape[1:], dtype=a.dtype)
    out[:a.shape[0]] = a
    return out


@nb.njit(cache=True, nogil=True)
def _run(x0, A, B, K, base, coord, power, sigma, lib_thr, h, t_final, event_tol, blowup, max_events,
         record_dt, zero_tol):
    n = x0.shape[0]
    s = A.shape[1]
    m = B.shape[1]
    z = np.empty(s)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    xn = np.empty(n)
    xm = np.empty(n)
    zk = np.empty(s)
    uk = np.empty(m)
    bu = np.empty(n)

    n_rec = int(np.floor(t_final / record_dt + 1e-9)) + 1
    rec_t = np.empty(n_rec + 1)
    rec_x = np.empty((n_rec + 1, n))
    rec_ev = np.empty(n_rec + 1, dtype=np.int64)  # index of the active event
    cap = 1024
    ev_t = np.empty(cap)
    ev_x = np.empty((cap, n))  # state at the event (left limit equals right limit)
    ev_u = np.empty((cap, m))
    ev_pre = np.empty(cap, dtype=np.int64)  # index of the input active just before

    x = x0.copy()
    t = 0.0
    # initial sample
    _zeta(x, base, coord, power, zk)
    for j in range(m):
        acc = 0.0
        for i in range(s):
            acc += K[j, i] * zk[i]
        uk[j] = acc
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += B[i, j] * uk[j]
        bu[i] = acc
    ev_t[0] = 0.0
    ev_x[0] = x
    ev_u[0] = uk
    ev_pre[0] = 0
    n_ev = 1
    active = 0
    sampling = _norm(x) > zero_tol

    rec_t[0] = 0.0
    rec_x[0] = x
    rec_ev[0] = 0
    r = 1
    nxt = 1
    status = 0
    while t < t_final and status == 0:
        hs = min(h, t_final - t)
        if hs <= 0.0:
            break
        _rk4(x, hs, A, bu, base, coord, power, z, k1, k2, k3, k4, tmp, xn)
        fired = False
        if sampling:
            en, th = _gap(xn, zk, sigma, lib_thr, base, coord, power, z)
            if en >= th:
                lo = 0.0
                hi = hs
                while hi - lo > event_tol:
                    mid = 0.5 * (lo + hi)
                    _rk4(x, mid, A, bu, base, coord, power, z, k1, k2, k3, k4, tmp, xm)
                    em, tm = _gap(xm, zk, sigma, lib_thr, base, coord, power, z)
                    if em >= tm:
                        hi = mid
                    else:
                        lo = mid
                hs = hi
                _rk4(x, hs, A, bu, base, coord, power, z, k1, k2, k3, k4, tmp, xn)
                fired = True
        t = t + hs
        for i in range(n):
            x[i] = xn[i]
        nx = _norm(x)
        if not (nx <= blowup):
            status = 1
        # one periodic row at the first step end past each grid instant
        if nxt < n_rec and t >= nxt * record_dt - 1e-12:
            rec_t[r] = t
            rec_x[r] = x
            rec_ev[r] = active
            r += 1
            nxt = max(nxt + 1, int(np.floor(t / record_dt + 1e-9)) + 1)
        if fired:
            if n_ev >= max_events:
                status = 2
                break
            if n_ev >= ev_t.shape[0]:
                cap *= 2
                ev_t = _grow(ev_t, cap)
                ev_x = _grow(ev_x, cap)
                ev_u = _grow(ev_u, cap)
                ev_pre = _grow(ev_pre, cap)
            _zeta(x, base, coord, power, zk)
            for j in range(m):
                acc = 0.0
                for i in range(s):
                    acc += K[j, i] * zk[i]
                uk[j] = acc
            for i in range(n):
                acc = 0.0
                for j in range(m):
                    acc += B[i, j] * uk[j]
                bu[i] = acc
            ev_t[n_ev] = t
            ev_x[n_ev] = x
            ev_u[n_ev] = uk
            ev_pre[n_ev] = active
            active = n_ev
            n_ev += 1
            if nx <= zero_tol:
                sampling = False
    if status == 0 and r < n_rec + 1 and (r == 0 or rec_t[r - 1] < t):
        rec_t[r] = t
        rec_x[r] = x
        rec_ev[r] = active
        r += 1
    return status, t, rec_t[:r], rec_x[:r], rec_ev[:r], ev_t[:n_ev], ev_x[:n_ev], ev_u[:n_ev], ev_pre[:n_ev]


# -- driver --------------------------------------------------------------------

def effective_step(cfg: SimConfig, pol: TriggerPolicy) -> float:
    """Integrator step after the tau/20 rule (with a warning when it shrinks)."""
    h = cfg.integrator_step
    if pol.tau is not None and h > pol.tau / 20:
        warnings.warn(f"integrator_step {h:g} shrunk to tau/20 = {pol.tau / 20:g}", stacklevel=3)
        h = pol.tau / 20
    if not cfg.event_tol < h:
        raise InvalidArgument(f"event_tol {cfg.event_tol:g} must be below the step {h:g}")
    return h


def simulate(sys: GroundTruthSystem, ctrl: Controller, pol: TriggerPolicy, cfg: SimConfig) -> SimTrace:
    lib = sys.library
    x0 = np.asarray(cfg.x0, dtype=float)
    if x0.shape != (sys.n,) or ctrl.K.shape != (sys.m, lib.s):
        raise InvalidArgument("system, controller and initial state dimensions disagree")
    if not pol.sigma > 0:
        raise InvalidArgument("sigma must be positive")
    h = effective_step(cfg, pol)
    tau = pol.tau
    max_events = int(cfg.t_final / tau * 10) + 2 if tau else np.iinfo(np.int64).max
    base, coord, power = lib.encode()
    K = np.ascontiguousarray(ctrl.K, dtype=float)
    out = _run(x0, np.ascontiguousarray(sys.A, dtype=float), np.ascontiguousarray(sys.B, dtype=float), K,
               base, coord, power, float(pol.sigma), pol.kind != ERROR_STATE, float(h), float(cfg.t_final),
               float(cfg.event_tol), float(cfg.blowup_norm), max_events, float(cfg.record_dt), ZERO_STATE)
    status, t_end, rec_t, rec_x, rec_ev, ev_t, ev_x, ev_u, ev_pre = out
    if status == _DIVERGED:
        raise SimulationDiverged(f"|x| exceeded {cfg.blowup_norm:g} at t={t_end:.6g}")
    if status == _RUNAWAY:
        raise RunawayEvents(f"more than {max_events} events before t={t_end:.6g}; the sampling contract is broken")
    return _assemble(sys, ctrl, pol, h, rec_t, rec_x, rec_ev, ev_t, ev_x, ev_u, ev_pre, cfg)


def _assemble(sys, ctrl, pol, h, rec_t, rec_x, rec_ev, ev_t, ev_x, ev_u, ev_pre, cfg):
    lib = sys.library
    # event rows carry left limits: the held sample is the previous one
    times = np.concatenate([rec_t, ev_t[1:]])
    states = np.vstack([rec_x, ev_x[1:]])
    held = np.concatenate([rec_ev, ev_pre[1:]])
    flag = np.r_[np.zeros(len(rec_t), bool), np.ones(len(ev_t) - 1, bool)]
    order = np.lexsort((flag, times))
    times, states, held, flag = times[order], states[order], held[order], flag[order]
    inputs = ev_u[held]
    zk = lib.eval(ev_x)[held]
    z = lib.eval(states)
    err = np.linalg.norm(zk - z, axis=1)
    ref = z if pol.kind != ERROR_STATE else states
    thr = pol.sigma * np.linalg.norm(ref, axis=1)
    V = np.einsum("ij,jk,ik->i", states, ctrl.S, states)
    return SimTrace(times, states, inputs, err, thr, V, flag, ev_t.copy(), pol.kind, pol.sigma, pol.tau, h,
                    meta={"x0": list(cfg.x0), "t_final": cfg.t_final, "event_tol": cfg.event_tol})


def simulate_many(sys, ctrl, pol, cfgs: list[SimConfig], workers: int | None = None) -> list[SimTrace]:
    """Independent runs; the compiled kernel releases the GIL so threads run in parallel."""
    from concurrent.futures import ThreadPoolExecutor

    if workers == 1 or len(cfgs) <= 1:
        return [simulate(sys, ctrl, pol, c) for c in cfgs]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda c: simulate(sys, ctrl, pol, c), cfgs))


def min_inter_event(trace_or_events) -> float:
    ev = trace_or_events.events if isinstance(trace_or_events, SimTrace) else np.asarray(trace_or_events, float)
    if len(ev) < 2:
        raise UndefinedResult("fewer than two events; minimum inter-event time is undefined")
    return float(np.diff(ev).min())


def threshold_violation(trace: SimTrace) -> float:
    """max(|e| - threshold) over recorded rows; 0 for an empty or all-zero trace."""
    if trace.times.size == 0:
        return 0.0
    return float(max(0.0, np.max(trace.error_norm - trace.threshold)))


def violation_slack(trace: SimTrace) -> np.ndarray:
    """Per-row tolerance sigma |x| 1e-3 + 1e-9."""
    return trace.sigma * np.linalg.norm(trace.states, axis=1) * 1e-3 + 1e-9
