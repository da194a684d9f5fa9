import numpy as np
import pytest

from losprob.geo import BaseStation, Building, Scene, StreetNetwork, TerrainGrid


def random_city(n_buildings, seed=0, half=1000.0, hmax=40.0, missing=0.05, hilly=True):
    """Random axis-aligned and rotated boxes over a square, with rolling terrain."""
    rng = np.random.default_rng(seed)
    blds = []
    for _ in range(n_buildings):
        cx, cy = rng.uniform(-half, half, 2)
        w, d = rng.uniform(2, 8, 2)
        a = rng.uniform(0, np.pi)
        c, s = np.cos(a), np.sin(a)
        ring = [(cx + c * x - s * y, cy + s * x + c * y)
                for x, y in ((-w, -d), (w, -d), (w, d), (-w, d))]
        known = rng.random() >= missing
        blds.append(Building(tuple(ring), float(rng.uniform(3, hmax)) if known else 0.0, known))
    if hilly:
        g = np.arange(-half - 100, half + 101, 50.0)
        X, Y = np.meshgrid(g, g)
        terrain = TerrainGrid((g[0], g[0]), 50.0, 5 * np.sin(X / 300) * np.cos(Y / 450))
    else:
        terrain = TerrainGrid.flat(0.0)
    bs = BaseStation("bs", (0.0, 0.0), 30.0, 5 * np.sin(0) * np.cos(0))
    return Scene(tuple(blds), terrain, StreetNetwork(()), (bs,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def acceptance(request):
    """Record one acceptance criterion: prints a PASS/FAIL line, then asserts."""
    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] acceptance {number:2d}: {title} -- {detail}"
        print(line)
        request.config.stash[ACCEPTANCE_LINES].append((number, line))
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
