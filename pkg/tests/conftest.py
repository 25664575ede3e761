import numpy as np
import pytest
from scipy import stats

from bhmoi.density import GriddedDensity, SupportGrid


def normal_density(grid: SupportGrid, mu: float, sd: float = 1.0) -> GriddedDensity:
    return GriddedDensity(grid, stats.norm.pdf(grid.t, mu, sd))


def random_densities(rng: np.random.Generator, n: int, grid: SupportGrid) -> list[GriddedDensity]:
    """Normal densities with random centres and spreads, a mix of overlapping and separated."""
    span = grid.upper - grid.lower
    mus = rng.uniform(grid.lower + 0.25 * span, grid.upper - 0.25 * span, n)
    sds = rng.uniform(0.02, 0.12, n) * span
    return [normal_density(grid, m, s) for m, s in zip(mus, sds)]


# ---------------------------------------------------------------- acceptance report

_CRITERIA: dict[str, tuple[int, str]] = {}
_OUTCOMES: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = (int(mark.args[0]), str(mark.args[1]))


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    number, _ = _CRITERIA[report.nodeid]
    if report.when == "call" or report.failed or report.skipped:
        _OUTCOMES.setdefault(number, []).append(report.passed and report.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    titles = {}
    for number, title in _CRITERIA.values():
        titles.setdefault(number, title)
    terminalreporter.section("acceptance criteria")
    for number in sorted(titles):
        results = _OUTCOMES.get(number)
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status:7s} {titles[number]}")


@pytest.fixture
def unit_grid():
    return SupportGrid(-6.0, 8.0, 512)
