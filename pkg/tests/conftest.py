import numpy as np
import pytest

from cpflow.icnn import ICNNConfig, actnorm_data_init, init_params


def central_diff(fn, x, eps=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (fn(xp) - fn(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_potential(d=6, seed=0, **kw):
    """Random ICNN with ActNorm initialized on a standard-normal batch."""
    config = ICNNConfig(input_dim=d, **{"depth": 3, "width": 8, **kw})
    params = init_params(config, seed=seed)
    batch = np.random.default_rng(seed + 1000).normal(size=(64, d))
    return config, actnorm_data_init(params, config, batch)


@pytest.fixture
def small_icnn():
    return make_potential(6, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
