import re

import pytest
import torch

torch.set_num_threads(1)

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or report.failed or report.skipped:
        number, title = int(m.group(1)), m.group(2).replace("_", " ")
        if number in _results and _results[number][0] == "FAIL":
            return
        detail = dict(report.user_properties).get("measured", "")
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        _results[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_results):
        status, title, detail = _results[number]
        line = f"criterion {number:2d}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
