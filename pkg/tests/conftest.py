import pytest

from enat.experiments import prepare_toy

VERDICTS: dict[int, str] = {}


@pytest.fixture(scope="session")
def toy_setup():
    """Cipher corpus (5k/200/500), trained teacher, distilled corpus and tables."""
    return prepare_toy()


@pytest.fixture
def verdict():
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str):
        VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
