import pytest

from fracwave.lattice import Grid, RegionMask


@pytest.fixture(scope="session")
def grid():
    return Grid(n=1, N=256, box_length=8.0, s=0.75, dt=1.0 / 512, nt=512)


@pytest.fixture(scope="session")
def small_grid():
    return Grid(n=1, N=64, box_length=8.0, s=0.75, dt=1.0 / 64, nt=64)


def reference_mask(g):
    return RegionMask.from_boxes(g, (-1.0, 1.0), [(-3.0, -1.05), (1.05, 1.5)], (1.7, 3.2))


@pytest.fixture(scope="session")
def mask(grid):
    return reference_mask(grid)


@pytest.fixture(scope="session")
def small_mask(small_grid):
    return reference_mask(small_grid)


# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: reference-scale acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
