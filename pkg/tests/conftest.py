"""Shared fixtures and the acceptance-criteria summary hook.

Tests marked `acceptance(num, title)` each carry one numbered criterion;
the terminal summary prints exactly one PASS/FAIL line per criterion so
the suite's verdict is readable at a glance.
"""

import numpy as np
import pytest

from organpool.datasets import load_dataset
from organpool.rng import keyed_rng
from organpool.synth import SynthSpec, synth_generate
from organpool.training import OptimConfig


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(num, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None and rep.when in ("setup", "call"):
        rep.acceptance = (marker.args[0], marker.args[1])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            tag = getattr(rep, "acceptance", None)
            if tag is None:
                continue
            num, title = tag
            ok = outcome == "passed" and criteria.get(num, (title, True))[1]
            criteria[num] = (title, ok)
    if not criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(criteria):
        title, ok = criteria[num]
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {num} ({title}): {verdict}")


@pytest.fixture(scope="session")
def small_spec():
    """A fast dataset spec for harness and CLI smokes."""
    return SynthSpec(n_train=28, n_val=10, n_test=12, d=8, signal=3.0, seed=11)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory, small_spec):
    out = tmp_path_factory.mktemp("small_dataset")
    return synth_generate(small_spec, out)


@pytest.fixture(scope="session")
def small_dataset(small_manifest):
    return load_dataset(small_manifest)


@pytest.fixture(scope="session")
def fast_optim():
    return OptimConfig(max_epochs=6, patience=4, warmup_epochs=2)


@pytest.fixture()
def rng():
    return keyed_rng(7, "tests")


@pytest.fixture()
def rng_factory():
    def make(*names):
        return keyed_rng(7, *names)
    return make


def assert_allclose(actual, desired, atol=0.0, rtol=1e-12):
    np.testing.assert_allclose(actual, desired, atol=atol, rtol=rtol)
