import numpy as np
import pytest

from vareg import DgpConfig, PanelData, simulate_panel


def small_config(**kw):
    base = dict(J=150, n_per_class=8, T=5, seed=11)
    base.update(kw)
    return DgpConfig(**base)


@pytest.fixture(scope="session")
def small_panel():
    """Simulated panel with correlated covariate, 150 teachers x 5 years."""
    return simulate_panel(small_config(), 0)


@pytest.fixture(scope="session")
def medium_panel():
    return simulate_panel(small_config(J=600, n_per_class=15, T=6, seed=5), 0)


def random_panel(rng, J=12, T=4, n=5, K=2, unbalanced=False, missing=0.0):
    """Small irregular panel with arbitrary labels for structural tests."""
    rows = []
    sid = 0
    for j in range(J):
        years = np.arange(2000, 2000 + T)
        if unbalanced:
            years = np.sort(rng.choice(np.arange(2000, 2000 + T + 2), size=rng.integers(2, T + 1), replace=False))
        for y in years:
            for _ in range(int(rng.integers(max(2, n - 2), n + 3)) if unbalanced else n):
                rows.append((f"s{sid}", f"t{j:03d}", int(y)))
                sid += 1
    N = len(rows)
    X = rng.normal(size=(N, K))
    score = X @ np.linspace(1, 0.5, K) + rng.normal(size=N)
    outcome = X @ np.linspace(2, -1, K) + rng.normal(size=N)
    if missing:
        outcome[rng.uniform(size=N) < missing] = np.nan
    s, t, y = zip(*rows)
    return PanelData.from_arrays(s, t, y, score, outcome, X)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
