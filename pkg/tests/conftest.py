import numpy as np
import pytest

from spkdisent.data import generate_synthetic_corpus


@pytest.fixture(scope="session")
def small_corpus():
    """4 speakers x 3 utterances x 1.5 s."""
    return generate_synthetic_corpus(4, 3, 1.5, seed=11)


@pytest.fixture(scope="session")
def tiny_corpus():
    """2 speakers x 2 utterances x 0.6 s, for end-to-end plumbing tests."""
    return generate_synthetic_corpus(2, 2, 0.6, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> str:
    line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
