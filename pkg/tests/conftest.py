import numpy as np
import pytest

from sica.datamodel import ComponentSet


def whiten_rows(x):
    """Exact symmetric whitening of the rows of ``x`` (population statistics)."""
    x = x - x.mean(axis=1, keepdims=True)
    cov = x @ x.T / x.shape[1]
    s, u = np.linalg.eigh(cov)
    out = (u / np.sqrt(s)) @ u.T @ x
    return out - out.mean(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def gaussian_components():
    def make(k, n, seed):
        z = np.random.default_rng(seed).standard_normal((k, n))
        return ComponentSet(whiten_rows(z), whitened=True)
    return make


_ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Record ``(passed, detail)`` for an acceptance criterion."""
    def record(criterion, passed, detail):
        _ACCEPTANCE[criterion] = (bool(passed), detail)
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
