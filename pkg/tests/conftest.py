import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    from streetkrig.dataio import synth_generate

    return synth_generate(16, 80, k_raw=4, zero_inflation=0.5, seed=3)


# one PASS/FAIL line per acceptance criterion, printed after the run
_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and report.passed:
        return
    num, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    results = item.config.stash[_CRITERIA]
    ok = report.passed and results.get(num, (True,))[0]
    results[num] = (ok, title, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(results):
        ok, title, detail = results[num]
        line = f"criterion {num} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
