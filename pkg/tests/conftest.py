import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# golden checksums and the determinism criterion assume single-threaded BLAS
from threadpoolctl import threadpool_limits  # noqa: E402

_LIMITS = threadpool_limits(1)

import pytest  # noqa: E402

# criterion number -> (passed, detail), filled by tests marked ``criterion(n)``
_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        if rep.skipped:
            _CRITERIA[marker.args[0]] = ("SKIP", detail or "skipped")
        else:
            _CRITERIA[marker.args[0]] = ("PASS" if rep.passed else "FAIL", detail or "error before measurement")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
