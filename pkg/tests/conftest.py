import numpy as np
import pytest

from helpers import load_corpus, noise_image


@pytest.fixture
def image():
    return noise_image(40, 30, seed=7)


@pytest.fixture
def corpus(tmp_path):
    return load_corpus(tmp_path / "corpus", n_images=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.outcome != "passed":
        _acceptance[name] = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, outcome in _acceptance.items():
        terminalreporter.write_line(f"{outcome:<5} {name}")
