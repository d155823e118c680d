import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ethodec", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ethodec")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class _Criterion:
    def __init__(self, name, sink):
        self.name = name
        self.detail = ""
        self._sink = sink

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok or self.detail else f"{exc_type.__name__}: {exc}"
        if not ok and self.detail:
            detail = f"{self.detail} ({exc_type.__name__}: {exc})"
        line = f"{'PASS' if ok else 'FAIL'}  {self.name}" + (f"  [{detail}]" if detail else "")
        self._sink.append(line)
        print(line)
        return False


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance line; failures propagate."""
    sink = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lambda name: _Criterion(name, sink)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
