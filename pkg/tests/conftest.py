import warnings

import numpy as np
import pytest

from etcdata import cli, experiment, synthesis, trigger


class Preset:
    """Everything derived from one preset config, built once per session."""

    def __init__(self, name):
        self.cfg = cli.resolve_config({"preset": name})
        self.sys = cli.build_system(self.cfg)
        self.lib = self.sys.library
        self.region = cli.region_of(self.cfg)
        self.D = experiment.collect_data(self.sys, cli.experiment_config(self.cfg))
        self.RQ = cli.rq_of(self.cfg, self.lib, self.region)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            self.ctrl = synthesis.design_contractive(self.D, np.eye(2), self.RQ, self.region, library=self.lib)
            self.lin = synthesis.design_linearization(self.D, library=self.lib)
        self.pol_state = trigger.design_error_state(self.ctrl, self.D, lib=self.lib, region=self.region)
        self.pol_lib = trigger.design_error_library(self.ctrl, self.D, 0.1, lib=self.lib, region=self.region)


_cache = {}


def _preset(name):
    if name not in _cache:
        _cache[name] = Preset(name)
    return _cache[name]


@pytest.fixture(scope="session")
def poly():
    return _preset("poly_khalil")


@pytest.fixture(scope="session")
def pend():
    return _preset("inverted_pendulum")


@pytest.fixture(scope="session", params=["poly_khalil", "inverted_pendulum"])
def preset(request):
    return _preset(request.param)


_verdicts = {}


def record(n, ok, detail):
    """Remember one acceptance verdict; printed in the terminal summary."""
    _verdicts[n] = (ok, detail)
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        ok, detail = _verdicts[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
