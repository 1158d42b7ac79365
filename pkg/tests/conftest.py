import numpy as np
import pytest

from psfcenter.geometry import ObservationSet


def exact_bundle(center, n=20, seed=0, spread=100.0, weights=None):
    """``n`` noiseless lines through ``center`` with random anchors."""
    rng = np.random.default_rng(seed)
    c = np.asarray(center, dtype=float)
    anchors = c + rng.uniform(-spread, spread, size=(n, 3))
    anchors[:, 2] = rng.uniform(0, spread, size=n)
    return ObservationSet(anchors, c - anchors, weights)


def noisy_bundle(center, n=30, seed=0, anchor_sigma=2.0, direction_sigma=0.01):
    rng = np.random.default_rng(seed)
    exact = exact_bundle(center, n, seed)
    anchors = exact.anchors + rng.normal(0, anchor_sigma, size=(n, 3))
    directions = exact.directions + rng.normal(0, direction_sigma, size=(n, 3))
    return ObservationSet(anchors, directions, rng.uniform(0.5, 2.0, size=n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail = results[number]
        terminalreporter.write_line(
            f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
