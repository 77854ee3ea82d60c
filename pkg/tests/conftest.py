import re

import pytest
import torch


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def acceptance(request):
    """Collects one ``(criterion, passed, detail)`` line per acceptance check."""
    if not hasattr(request.config, "acceptance_lines"):
        request.config.acceptance_lines = {}
    return request.config.acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = dict(getattr(config, "acceptance_lines", {}))
    # a criterion whose test crashed before recording still gets a FAIL line
    for key in ("failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m and int(m.group(1)) not in lines:
                lines[int(m.group(1))] = (False, f"test {key}: {rep.nodeid}")
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        ok, detail = lines[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
