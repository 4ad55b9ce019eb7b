"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""
import time
import warnings

import numpy as np
import pytest

from etcdata import boa, cli, experiment, synthesis, trigger
from etcdata import simulate as sim
from etcdata.errors import DegenerateRegion
from etcdata.model import RegionBox

from conftest import record
from test_trigger import scalar_fixture

PRESETS = ["poly_khalil", "inverted_pendulum"]
# MIET run horizons (the tau/20 step makes pendulum runs expensive)
MIET_HORIZON = {"poly_khalil": 2.0, "inverted_pendulum": 0.3}


def check(n, ok, detail):
    record(n, ok, detail)
    assert ok, f"criterion {n}: {detail}"


def test_01_closed_loop_identities():
    t0 = time.perf_counter()
    worst = 0.0
    for name in PRESETS:
        cfg = cli.resolve_config({"preset": name})
        sys_ = cli.build_system(cfg)
        D = experiment.collect_data(sys_, cli.experiment_config(cfg))
        region = cli.region_of(cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ctrls = [synthesis.design_contractive(D, np.eye(sys_.n), cli.rq_of(cfg, sys_.library, region), region,
                                                  library=sys_.library),
                     synthesis.design_linearization(D, library=sys_.library)]
        for c in ctrls:
            worst = max(worst, np.linalg.norm(D.X1 @ c.G - (sys_.A + sys_.B @ c.K), 2),
                        np.linalg.norm(D.X1 @ c.L - sys_.B @ c.K, 2))
    dt = time.perf_counter() - t0
    check(1, worst < 1e-7 and dt < 10, f"max identity error {worst:.2e}, {dt:.1f} s")


def test_02_synthesis_certificates(poly, pend):
    rows = []
    for p in (poly, pend):
        for c in (p.ctrl, p.lin):
            rows.append((synthesis.program_residual(c, p.D), np.linalg.eigvals(p.D.X1 @ c.G1).real.max()))
    res = max(r for r, _ in rows)
    hur = max(h for _, h in rows)
    check(2, res <= 1e-6 and hur < -1e-6, f"max LMI residual eig {res:.2e}, max Re eig(X1 G1) {hur:.3g}")


def test_03_pendulum_contractivity(pend):
    t0 = time.perf_counter()
    X = np.random.default_rng(3).uniform(-5, 5, size=(10_000, 2))
    worst = synthesis.contractivity_residuals(pend.ctrl, pend.D, pend.lib, X).max()
    dt = time.perf_counter() - t0
    check(3, worst <= 1e-6 and dt < 30, f"max residual eig {worst:.2e} over 1e4 points, {dt:.2f} s")


def _implication_worst(M, k, sigma, rng, count=100_000):
    nu = rng.standard_normal((count, M.shape[0]))
    ref, e = nu[:, :k], nu[:, k:]
    # radii uniform in [0, sigma |ref|], a quarter of them on the boundary
    frac = rng.uniform(size=count)
    frac[: count // 4] = 1.0
    e *= (frac * sigma * np.linalg.norm(ref, axis=1) / np.linalg.norm(e, axis=1))[:, None]
    nu = np.hstack([ref, e])
    q = np.einsum("ij,jk,ik->i", nu, M, nu)
    return float(np.max(q / np.einsum("ij,ij->i", nu, nu)))


def test_04_trigger_implication(poly, pend):
    rng = np.random.default_rng(4)
    worst = -np.inf
    for p in (poly, pend):
        worst = max(worst, _implication_worst(trigger.build_M(p.ctrl, p.D), p.D.n, p.pol_state.sigma, rng))
        Mb = trigger.build_Mbar(p.ctrl, p.D, p.pol_lib.eta)
        worst = max(worst, _implication_worst(Mb, p.D.s, p.pol_lib.sigma, rng))
    check(4, worst <= 1e-9, f"max nu'M nu / |nu|^2 = {worst:.2e} over 4 x 1e5 samples")


def test_05_scalar_sigma():
    ctrl, D = scalar_fixture(2.0, 1.0)
    s = trigger.design_error_state(ctrl, D).sigma
    check(5, abs(s - 0.5) <= 1e-4, f"sigma = {s:.8f}")


def _miet_start_gamma(p, pol):
    """gamma* of the certified set W = V intersect X, or the box-fitting level when V admits none."""
    V = boa.v_state(p.ctrl, p.lib) if pol.kind == trigger.ERROR_STATE else boa.v_library(p.ctrl, p.lib, pol.eta)
    hi = boa.default_gamma_hi(p.ctrl.S, p.region)
    try:
        return boa.largest_sublevel(p.ctrl.S, boa.intersection(V, boa.box(p.region)), hi), "W"
    except DegenerateRegion:
        return hi, "box"


def test_06_miet(poly, pend):
    t0 = time.perf_counter()
    lines, ok = [], True
    for name, p in (("poly_khalil", poly), ("inverted_pendulum", pend)):
        for pol in (p.pol_state, p.pol_lib):
            g, where = _miet_start_gamma(p, pol)
            X0 = boa.ellipse_points(p.ctrl.S, g, boa.unit_directions(2, 20))
            cfgs = [sim.SimConfig(x, MIET_HORIZON[name], pol.tau / 20, 1e-12) for x in X0]
            runs = sim.simulate_many(p.sys, p.ctrl, pol, cfgs, workers=1)
            ie = np.concatenate([tr.inter_event for tr in runs])
            bad = int(np.sum(ie < pol.tau))
            ratio = ie.min() / pol.tau
            ok &= bad == 0 and 1.0 <= ratio <= 50.0
            lines.append(f"{name}/{pol.kind} ({where}) violations {bad}, ratio {ratio:.3g}")
    dt = time.perf_counter() - t0
    ok &= dt < 120
    check(6, ok, "; ".join(lines) + f"; {dt:.0f} s")


def test_07_ell_dominates_omega(poly, pend):
    rows, ok = [], True
    for p in (poly, pend):
        c = p.pol_state.constants
        ratio = trigger.miet(p.pol_state.sigma, c["omega"]) / trigger.miet(p.pol_state.sigma, c["ell"])
        ok &= c["ell"] >= c["omega"] and ratio >= 1.0 and np.isclose(ratio, c["ell"] / c["omega"])
        rows.append(f"ell/omega = {c['ell'] / c['omega']:.4g}")
    check(7, ok, ", ".join(rows))


def test_08_boa_comparison(poly):
    gz = boa.largest_sublevel(poly.ctrl.S, boa.z_set(poly.ctrl, poly.D, poly.lib), 10.0)
    gv = boa.largest_sublevel(poly.ctrl.S, boa.v_library(poly.ctrl, poly.lib, 0.1), 10.0)
    check(8, gv / gz < 0.5, f"gamma(V_library) = {gv:.4g}, gamma(Z) = {gz:.4g}, ratio {gv / gz:.3g}")


@pytest.mark.slow
def test_09_invariance(poly):
    g = boa.largest_sublevel(poly.ctrl.S, boa.z_set(poly.ctrl, poly.D, poly.lib), 10.0)
    X0 = boa.ellipse_points(poly.ctrl.S, g, boa.unit_directions(2, 20))
    pol = poly.pol_state
    cfgs = [sim.SimConfig(x, 20.0, pol.tau / 20, 1e-12) for x in X0]
    runs = sim.simulate_many(poly.sys, poly.ctrl, pol, cfgs, workers=1)
    vmax = max(tr.lyapunov.max() for tr in runs)
    final = max(tr.final_norm for tr in runs)
    ok = vmax <= g * (1 + 1e-6) and final < 1e-2
    check(9, ok, f"gamma* = {g:.4g}, max V / gamma* = {vmax / g:.8f}, max final |x| = {final:.2e}")


def test_10_rq_domination(poly, pend):
    quarter = RegionBox.symmetric([0.25, 0.25])
    auto = synthesis.estimate_rq(poly.lib, quarter)
    manual = np.diag([0.2872, 0.0931])
    # both the auto bound and the preset gram must dominate the sampled gradients
    gap_grid = synthesis.rq_domination_gap(poly.lib, quarter, auto)
    gap_manual = synthesis.rq_domination_gap(poly.lib, quarter, synthesis.sqrt_psd(manual))
    gap_pend = synthesis.rq_domination_gap(pend.lib, pend.region, synthesis.estimate_rq(pend.lib, pend.region))
    R = synthesis.estimate_rq(pend.lib, pend.region)
    gap_pend_ref = lmi_min(R @ R.T - np.diag([1.0, 0.0]))
    ok = min(gap_grid, gap_manual, gap_pend) >= -1e-12 and gap_pend_ref >= -1e-12
    check(10, ok, f"poly auto gap {gap_grid:.3g}, preset gap {gap_manual:.3g}; "
                  f"pendulum auto gap {gap_pend:.3g}, vs diag(1,0) {gap_pend_ref:.3g}")


def lmi_min(M):
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_11_repro_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["repro", "poly_khalil", "--out", str(a)]) == 0
    assert cli.main(["repro", "poly_khalil", "--out", str(b)]) == 0
    ta, tb = _tree(a), _tree(b)
    diff = sorted(k for k in ta.keys() | tb.keys() if ta.get(k) != tb.get(k))
    check(11, not diff and len(ta) > 5, f"{len(ta)} files compared, {len(diff)} differ")
