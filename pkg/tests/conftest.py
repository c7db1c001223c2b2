import sys

import pytest

from cxrfusion.core import ModelOutput, Verdict


def output(backend_id, case_id="c1", text=None, verdict=None, error=None):
    if text is None and error is None:
        error = "backend_error: down"
    return ModelOutput(backend_id, case_id, text, None if verdict is None else Verdict(verdict), 0, error)


@pytest.fixture
def make_output():
    return output


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
