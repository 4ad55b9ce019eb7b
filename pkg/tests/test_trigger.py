import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etcdata import trigger
from etcdata.errors import InvalidArgument
from etcdata.model import DataMatrices
from etcdata.synthesis import Controller


def scalar_fixture(theta=2.0, coupling=1.0):
    """n = s = m = 1 with S X1 L = coupling and Theta = theta."""
    D = DataMatrices(U0=[[1.0, 0.0]], X0=[[0.0, 1.0]], Z0=[[0.0, 1.0]], X1=[[1.0, 0.0]])
    # [U0; Z0] = I, so L = [K; 0] and X1 L = K
    K = np.array([[coupling]])
    G = np.array([[0.0], [1.0]])
    L = np.vstack([K, [[0.0]]])
    one = np.eye(1)
    ctrl = Controller(K=K, G=G, L=L, P=one, S=one, method="contractive", Omega=theta * one,
                      Theta=theta * one, Phi=np.zeros((1, 0)), beta=theta)
    return ctrl, D


def grid_sigma(M, k, lo=-12, hi=6, num=20001):
    """Brute-force oracle: best sigma over a log grid of mu."""
    W, C = -M[:k, :k], M[:k, k:]
    best = 0.0
    for mu in np.logspace(lo, hi, num):
        best = max(best, np.linalg.eigvalsh(mu * W - mu ** 2 * C @ C.T)[0])
    return np.sqrt(best)


def test_scalar_sigma_is_one_half():
    # sigma^2(mu) = mu - mu^2 peaks at mu = 1/2 with value 1/4
    ctrl, D = scalar_fixture()
    pol = trigger.design_error_state(ctrl, D)
    assert pol.sigma == pytest.approx(0.5, abs=1e-4)
    assert pol.mu == pytest.approx(0.5, abs=1e-3)
    assert pol.lmi_residual <= 1e-9


@pytest.mark.parametrize("theta,coupling", [(2.0, 1.0), (1.0, 3.0), (0.5, 0.1)])
def test_scalar_closed_form(theta, coupling):
    # max_mu mu theta/2 - mu^2 c^2  =>  sigma = theta / (4 c)
    ctrl, D = scalar_fixture(theta, coupling)
    assert trigger.design_error_state(ctrl, D).sigma == pytest.approx(theta / (4 * coupling), rel=1e-4)


def test_zero_coupling_hits_cap():
    ctrl, D = scalar_fixture(2.0, 0.0)
    assert trigger.design_error_state(ctrl, D, sigma_cap=3.0).sigma == pytest.approx(3.0, rel=1e-6)


def test_tiny_cap_is_respected(poly):
    pol = trigger.design_error_state(poly.ctrl, poly.D, sigma_cap=1e-9)
    assert pol.sigma == pytest.approx(1e-9, rel=1e-6)


@pytest.mark.parametrize("kind", ["state", "library"])
def test_sigma_matches_grid_oracle(preset, kind):
    if kind == "state":
        M, k, pol = trigger.build_M(preset.ctrl, preset.D), preset.D.n, preset.pol_state
    else:
        M, k, pol = trigger.build_Mbar(preset.ctrl, preset.D, 0.1), preset.D.s, preset.pol_lib
    ref = grid_sigma(M, k)
    assert pol.sigma >= ref * (1 - 1e-3)
    assert pol.sigma <= ref * (1 + 1e-3)
    assert trigger.lmi.max_eig(pol.mu * M - trigger.psi(pol.sigma, k, M.shape[0] - k)) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_triggering_implies_negative_form(seed):
    from conftest import _preset

    p = _preset("poly_khalil")
    M, pol = trigger.build_M(p.ctrl, p.D), p.pol_state
    rng = np.random.default_rng(seed)
    x = rng.normal(size=2)
    e = rng.normal(size=6)
    e *= pol.sigma * np.linalg.norm(x) * rng.uniform() / np.linalg.norm(e)
    nu = np.r_[x, e]
    assert nu @ M @ nu <= 1e-9 * nu @ nu


def test_psi_and_mbar_shapes(poly):
    assert np.array_equal(trigger.psi(0.5, 1, 2), np.diag([-0.25, 1.0, 1.0]))
    assert trigger.build_M(poly.ctrl, poly.D).shape == (8, 8)
    Mb = trigger.build_Mbar(poly.ctrl, poly.D, 0.1)
    assert Mb.shape == (12, 12)
    np.testing.assert_allclose(Mb[2:6, 2:6], -0.1 * np.eye(4))
    with pytest.raises(InvalidArgument):
        trigger.build_Mbar(poly.ctrl, poly.D, 0.0)


def test_miet_formula():
    assert trigger.miet(1.0, 1.0) == 0.5
    assert trigger.miet(0.0402, 10.0) == pytest.approx(0.0402 / (10.0 * 1.0402))
    with pytest.raises(InvalidArgument):
        trigger.miet(0.0, 1.0)


def test_constants_order(preset):
    c = preset.pol_state.constants
    assert c["ell1"] >= 1.0 and c["zeta_ratio"] >= 1.0
    assert c["ell"] >= c["omega"]
    assert c["omega"] == pytest.approx(c["ell1"] * max(c["norm_X1G"], c["norm_X1L"]))
    assert preset.pol_state.tau == pytest.approx(trigger.miet(preset.pol_state.sigma, c["ell"]))


def test_poly_jacobian_sup_on_box(poly):
    # sup |d zeta/dx| on the quarter box is attained at a corner; the grid includes corners
    X = np.array([[0.25, 0.25], [-0.25, 0.25], [0.25, -0.25], [-0.25, -0.25]])
    sup = np.linalg.norm(poly.lib.jac(X), ord=2, axis=(1, 2)).max()
    assert poly.pol_state.constants["ell1"] >= 1.02 * sup - 1e-12


def test_policy_round_trip(tmp_path, poly):
    path = tmp_path / "p.json"
    poly.pol_lib.save(path)
    pol = trigger.TriggerPolicy.load(path)
    assert pol.kind == trigger.ERROR_LIBRARY and pol.eta == 0.1
    assert pol.tau == poly.pol_lib.tau and pol.region.to_dict() == poly.region.to_dict()


def test_unknown_kind_rejected():
    with pytest.raises(InvalidArgument):
        trigger.TriggerPolicy("error-output", 0.1, 1.0)
