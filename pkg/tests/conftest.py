import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.skipped or rep.failed):
        return
    n = mark.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.skipped:
        status = "N/A "
        if not detail and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2].removeprefix("Skipped: ")
    else:
        status = "FAIL" if rep.failed else "PASS"
    _VERDICTS.setdefault(n, []).append((status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_VERDICTS):
        parts = _VERDICTS[n]
        statuses = {s for s, _ in parts}
        # a criterion spread over several tests fails if any part fails
        status = "FAIL" if "FAIL" in statuses else ("PASS" if "PASS" in statuses else "N/A ")
        detail = "; ".join(d for _, d in parts if d)
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
