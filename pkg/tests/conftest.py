import re

import numpy as np
import pytest

from mrgenius.data import ObservationTable

CRITERIA = {
    1: "continuous exposure, single IV simulation",
    2: "binary exposure, single IV simulation",
    3: "ten-IV simulation: GMM, efficient and MR-Egger",
    4: "efficient equals plain estimator on a single binary IV",
    5: "closed forms equal grid-search roots of their moments",
    6: "bread vs finite differences and Wald CI coverage",
    7: "additive-hazards recursion",
    8: "two-step generated-instrument TSLS equivalence",
}

_outcomes: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_", report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(int(m.group(1)), []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        results = _outcomes.get(k)
        if not results:
            status = "NOT RUN"
        elif all(r == "passed" for r in results):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {k}: {status}  {CRITERIA[k]}")


def heteroscedastic_table(n=400, seed=0, binary_g=True, alpha=-0.5, beta=0.5, p=1, binary_a=False):
    """Small single/multi-IV data set with var(A|G) moving in G and a direct G effect on Y."""
    rng = np.random.default_rng(seed)
    G = rng.binomial(1, 0.5, (n, p)).astype(float) if binary_g else rng.normal(size=(n, p))
    U = rng.normal(size=n)
    if binary_a:
        prob = np.clip(0.3 + 0.2 * G.sum(axis=1) / p + 0.15 * np.tanh(U), 0.02, 0.98)
        A = rng.binomial(1, prob).astype(float)
    else:
        A = -G.sum(axis=1) + U + np.abs(1 + G.sum(axis=1)) * rng.normal(size=n)
    Y = alpha * G.sum(axis=1) + beta * A + U + rng.normal(size=n)
    return ObservationTable(g=G, a=A, y=Y, exposure_kind="binary" if binary_a else "continuous")


@pytest.fixture
def table():
    return heteroscedastic_table()
