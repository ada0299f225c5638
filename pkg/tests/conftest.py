import numpy as np
import pytest

from fogcache.delay import DelayEvaluator
from fogcache.model import ChannelParams, DemandModel, instance_from_positions
from fogcache.rates import Scheme, build_rate_table

TWO_CELL_PREFS = np.array([[0.7, 0.3], [0.4, 0.6], [0.2, 0.8]])


@pytest.fixture(scope="session")
def channel():
    return ChannelParams(mc_samples=4000, mc_seed=0)


@pytest.fixture(scope="session")
def two_cell_instance():
    # two cells; the middle user sits in the overlap
    return instance_from_positions([(0.0, 0.0), (200.0, 0.0)], [(-50.0, 0.0), (100.0, 0.0), (250.0, 0.0)])


@pytest.fixture(scope="session")
def two_cell_demand():
    return DemandModel(TWO_CELL_PREFS.copy())


@pytest.fixture(scope="session", params=list(Scheme), ids=lambda s: s.value)
def two_cell_eval(request, two_cell_instance, two_cell_demand, channel):
    table = build_rate_table(two_cell_instance, channel, request.param)
    return DelayEvaluator(two_cell_instance, two_cell_demand, table)


@pytest.fixture(scope="session")
def two_cell_coop(two_cell_instance, two_cell_demand, channel):
    return DelayEvaluator(two_cell_instance, two_cell_demand, build_rate_table(two_cell_instance, channel, Scheme.COOPERATIVE))


@pytest.fixture(scope="session")
def two_cell_noncoop(two_cell_instance, two_cell_demand, channel):
    return DelayEvaluator(two_cell_instance, two_cell_demand, build_rate_table(two_cell_instance, channel, Scheme.NON_COOPERATIVE))


def pytest_configure(config):
    config.acceptance_parts = {}


@pytest.fixture
def record(request):
    """Record a sub-check of an acceptance criterion for the end-of-run summary."""
    parts = request.config.acceptance_parts

    def _record(criterion: int, part: str, passed: bool, detail: str) -> bool:
        parts.setdefault(criterion, []).append((part, bool(passed), detail))
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    parts = getattr(config, "acceptance_parts", {})
    if not parts:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(parts):
        checks = parts[criterion]
        status = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        detail = "; ".join(f"{name} {'ok' if ok else 'FAILED'} ({d})" for name, ok, d in checks)
        terminalreporter.write_line(f"criterion {criterion}: {status}  {detail}")
