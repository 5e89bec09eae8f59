import pytest

CRITERIA = []


@pytest.fixture(scope="session")
def criterion_report():
    def report(tag, passed, detail):
        line = f"{tag}: {'PASS' if passed else 'FAIL'}  {detail}"
        CRITERIA.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
