"""Shared solver fixtures; stationary solves are cached for the whole session."""

import pytest

from rfqgate.hjb import GridSpec, stationary_solve
from rfqgate.model import default_params

# Small grid for wiring and invariant tests (dt * total rate = 0.475 < 0.5).
SMALL = GridSpec(q_max=20.0, n_R=21, n_t=600)
# Acceptance grid: the score dynamics need a fine R grid (interpolation
# diffusion is first order in the R spacing).
ACCEPT = GridSpec(n_R=201, n_t=2000)

_cache: dict = {}


def solve_cached(key, params, grid, **kw):
    if key not in _cache:
        _cache[key] = stationary_solve(params, grid, **kw)
    return _cache[key]


@pytest.fixture(scope="session")
def params():
    return default_params()


@pytest.fixture(scope="session")
def params_free(params):
    return params.updated({"score.alpha": 0.0})


@pytest.fixture(scope="session")
def ci_feedback(params):
    return solve_cached("ci", params, GridSpec.ci())


@pytest.fixture(scope="session")
def ci_free(params_free):
    return solve_cached("ci0", params_free, GridSpec.ci())


@pytest.fixture(scope="session")
def small_feedback(params):
    return solve_cached("small", params, SMALL)


@pytest.fixture(scope="session")
def acc_feedback(params):
    return solve_cached("acc", params, ACCEPT)


@pytest.fixture(scope="session")
def acc_free(params_free):
    return solve_cached("acc0", params_free, ACCEPT)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance check; returns the flag for asserting."""
    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{label:<28} {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
