import logging
import os

import pytest
from hypothesis import HealthCheck, settings

from dxnet.core import local_cluster

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))

logging.getLogger("dxnet.config").setLevel(logging.ERROR)


def _pair(transport, config=None):
    nodes = local_cluster(2, config, transport=transport)
    yield nodes
    for n in nodes:
        n.shutdown(flush=False)


@pytest.fixture
def loopback_pair():
    yield from _pair("loopback")


@pytest.fixture(params=["loopback", "tcp"])
def any_pair(request):
    yield from _pair(request.param)


# -- acceptance report -------------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    prev = _criteria.get(number, (title, True))
    if rep.when == "call" or failed:
        _criteria[number] = (title, prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}  {'PASS' if ok else 'FAIL'}  {title}")
