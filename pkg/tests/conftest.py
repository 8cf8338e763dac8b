import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion -> list of (part, passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, list[tuple[str, bool, str]]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict():
    """Record a criterion outcome, print it, then assert it."""

    def record(criterion: int, passed: bool, detail: str, part: str = ""):
        ACCEPTANCE.setdefault(str(criterion), []).append((part, bool(passed), detail))
        label = f"{criterion}{part}"
        print(f"criterion {label}: {'PASS' if passed else 'FAIL'}  {detail}")
        assert passed, f"criterion {label}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=int):
        parts = ACCEPTANCE[key]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{'(' + p[0] + ') ' if p[0] else ''}{'pass' if p[1] else 'FAIL'}: {p[2]}"
                           for p in parts)
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end optimisation runs (minutes)")
