import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dualflow.market import BlackScholes
from dualflow.utility import Exponential, ExponentialMixture

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=15, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def merton():
    """Black-Scholes market with Sharpe ratio 0.5 over one year."""
    return BlackScholes.from_sharpe(0.5, sigma=0.2, T=1.0)


@pytest.fixture(scope="session")
def exp1():
    return Exponential(1.0)


@pytest.fixture(scope="session")
def mixture():
    return ExponentialMixture((0.5, 0.5), (1.0, 2.0))


def merton_value(gamma: float, theta: float, T: float, x: float, t: float = 0.0) -> float:
    """Closed-form exponential-utility value -exp(-γx - θ²(T-t)/2)."""
    return -float(np.exp(-gamma * x - 0.5 * theta**2 * (T - t)))


# acceptance verdicts: criterion -> list of (part, ok, detail)
_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def verdict(request):
    """Record one part of a numbered acceptance criterion."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(criterion: int, part: str, ok: bool, detail: str) -> bool:
        store.setdefault(criterion, []).append((part, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        parts = store[n]
        ok = all(p[1] for p in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}")
        for part, good, detail in parts:
            terminalreporter.write_line(f"    {'ok  ' if good else 'FAIL'} {part}: {detail}")
