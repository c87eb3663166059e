import numpy as np
import pytest

from apgw.model import SurvivalDataset

# criterion -> list of (item, passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


@pytest.fixture
def acceptance():
    """Record one acceptance check; the terminal summary prints one line per criterion."""

    def record(criterion: str, item: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE_RESULTS.setdefault(criterion, []).append((item, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE_RESULTS, key=lambda c: int(c.split()[0].lstrip("AC"))):
        items = ACCEPTANCE_RESULTS[criterion]
        ok = all(p for _, p, _ in items)
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {criterion}")
        for item, passed, detail in items:
            if not passed or tr.config.option.verbose > 0:
                tr.write_line(f"        {'ok  ' if passed else 'FAIL'} {item}: {detail}")


@pytest.fixture
def toy_data():
    rng = np.random.default_rng(42)
    n = 40
    x = np.column_stack([rng.integers(0, 2, n), rng.normal(size=n)])
    t = rng.weibull(1.3, n) * 2.0 + 0.01
    d = (rng.random(n) < 0.7).astype(int)
    return SurvivalDataset(t, d, x, ("x1", "x2"))
