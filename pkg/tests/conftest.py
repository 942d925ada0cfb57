import numpy as np
import pytest
from hypothesis import settings

from neuboots import nn
from neuboots.weights import make_rng

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return make_rng(12345)


def small_net(rng, sizes=(3, 5, 4, 2), hidden="tanh", output="identity", members=()):
    """Small net with nonzero biases so bias gradients are exercised."""
    net = nn.init_net(list(sizes), rng, hidden=hidden, output=output, members=members)
    for b in net.biases:
        b[...] = rng.normal(scale=0.3, size=b.shape)
    return net


def numeric_grad(f, params, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of every array in ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = f()
            p[idx] = old - eps
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def max_rel_err(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor))))
    return worst


# -- acceptance reporting ------------------------------------------------------------
# Tests marked ``criterion(n)`` get one summary line each at the end of the run,
# with whatever they stored under ``record_property("detail", ...)``.

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        if report.failed and not detail:
            detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
        _CRITERIA.append((marker.args[0], report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, outcome, detail in sorted(_CRITERIA):
        word = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"criterion {n:>2}: {word}  {detail}")
