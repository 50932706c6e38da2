import pytest

from fedisa import data as dp

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def small_data():
    """Tiny processed dataset (10 columns) for fast simulator tests."""
    return dp.preprocess(dp.synthesize(n_rows=240, seed=11), n_components=10, seed=11)


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""
    def report(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        _CRITERIA[number] = line
        print(line)
        assert passed, line
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
