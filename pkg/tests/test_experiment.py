import numpy as np
import pytest

from etcdata import experiment
from etcdata.errors import ExperimentDiverged, InvalidArgument
from etcdata.experiment import ExperimentConfig, InputSignal, check_richness, collect_data, rk4_step
from etcdata.model import FunctionLibrary, GroundTruthSystem


def scalar_system(a=-1.0):
    lib = FunctionLibrary(1)
    return GroundTruthSystem([[a]], [[1.0]], lib)


def test_rk4_matches_exponential():
    x = np.array([1.0])
    for i in range(100):
        x = rk4_step(lambda t, y: -2.0 * y, i * 0.01, x, 0.01)
    # global RK4 error is about |lambda|^5 h^4 / 120 ~ 3e-9
    assert abs(x[0] - np.exp(-2.0)) < 1e-8


def test_input_signal_interpolates():
    sig = InputSignal([0.0, 1.0, 2.0], [0.0, 2.0, -2.0])
    assert sig(0.5)[0] == pytest.approx(1.0)
    assert sig(1.5)[0] == pytest.approx(0.0)
    with pytest.raises(InvalidArgument):
        InputSignal([0.0, 0.0], [1.0, 2.0])


def test_config_validation():
    with pytest.raises(InvalidArgument):
        ExperimentConfig(1.0, 0.1, (-1, 1), [(-1, 1)], integrator_step=0.05)
    with pytest.raises(InvalidArgument):
        ExperimentConfig(1.0, 0.1, (1, -1), [(-1, 1)]).input_bounds(1)
    assert ExperimentConfig(1.0, 0.1, (-1, 1), [(-1, 1)]).n_samples == 10


def test_poly_preset_gives_ten_columns(poly):
    assert poly.D.T == 10
    assert poly.D.consistent_with(poly.lib)
    np.testing.assert_allclose(poly.D.X1, poly.sys.A @ poly.D.Z0 + poly.sys.B @ poly.D.U0)


def test_collection_is_deterministic(poly):
    cfg = ExperimentConfig(1.0, 0.1, (-20, 20), [(-1, 1), (-1, 1)], 0)
    a, b = collect_data(poly.sys, cfg), collect_data(poly.sys, cfg)
    assert experiment.data_hash(a) == experiment.data_hash(b)
    c = collect_data(poly.sys, ExperimentConfig(1.0, 0.1, (-20, 20), [(-1, 1), (-1, 1)], 1))
    assert experiment.data_hash(c) != experiment.data_hash(a)


def test_zero_input_range_gives_zero_u0(poly):
    D = collect_data(poly.sys, ExperimentConfig(1.0, 0.1, (0, 0), [(-1, 1), (-1, 1)], 0))
    assert np.all(D.U0 == 0)
    # with u = 0 the x2 row of X0 is constant, so the data are not rich
    assert not check_richness(D)["full_rank"]


def test_state_trajectory_matches_closed_form():
    sys_ = scalar_system(-1.0)
    cfg = ExperimentConfig(1.0, 0.1, (0, 0), [(1, 1)], 0)
    D = collect_data(sys_, cfg)
    np.testing.assert_allclose(D.X0[0], np.exp(-0.1 * np.arange(10)), rtol=1e-9)


def test_blowup_raises():
    sys_ = scalar_system(50.0)
    with pytest.raises(ExperimentDiverged):
        collect_data(sys_, ExperimentConfig(1.0, 0.1, (0, 0), [(1, 1)], 0, blowup_norm=1e3))


def test_richness_on_presets(preset):
    r = check_richness(preset.D)
    assert r["full_rank"]
    assert len(r["singular_values"]) == preset.D.m + preset.D.s


def test_bundle_round_trip(tmp_path, poly):
    experiment.save_bundle(poly.D, tmp_path)
    D = experiment.load_bundle(tmp_path)
    for k in ("U0", "X0", "Z0", "X1"):
        np.testing.assert_array_equal(getattr(D, k), getattr(poly.D, k))
    assert (tmp_path / "manifest.json").exists()
    assert (tmp_path / "U0.csv").read_text().splitlines()[0] == "u1"


def test_concat_of_experiments(poly):
    D = experiment.DataMatrices.concat([poly.D, poly.D])
    assert D.T == 2 * poly.D.T
