import numpy as np
import pytest

from wlca.dataset import ItemSchema, SurveyDataset
from wlca.lca import EmConfig, fit_lca
from wlca.simulate import generate, ai_risk_spec

FAST_EM = EmConfig(n_starts=30, n_best=5)


def make_dataset(codes, cards, weights=None, extra_items=(), extra_values=None):
    codes = np.asarray(codes, dtype=float)
    items = [ItemSchema(f"y{j + 1}", c, "indicator") for j, c in enumerate(cards)]
    values = codes
    if extra_items:
        items += list(extra_items)
        values = np.column_stack([codes, extra_values])
    w = np.ones(codes.shape[0]) if weights is None else weights
    return SurveyDataset(tuple(items), values, w)


@pytest.fixture(scope="session")
def ai_risk_small():
    """AI-risk-like synthetic data, n = 1500, lognormal weights."""
    data, classes = generate(ai_risk_spec(n=1500, seed=3))
    return data, classes


@pytest.fixture(scope="session")
def ai_risk_model(ai_risk_small):
    data, _ = ai_risk_small
    return fit_lca(data, 4, FAST_EM, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def report(capsys):
    """Print one acceptance verdict line immediately and keep it for the summary."""
    def emit(n, name, status, detail):
        line = f"CRITERION {n:2d} {status:4s} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
