import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report: one line per criterion at the end of the run
_CRITERIA = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            _CRITERIA.setdefault(mark.args[0], [mark.args[1], [], []])
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        entry = _CRITERIA[props["criterion"]]
        entry[1].append(report.outcome)
        if "measured" in props:
            entry[2].append(props["measured"])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: (int("".join(filter(str.isdigit, c))), c)):
        desc, outcomes, measured = _CRITERIA[cid]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        line = f"{status:<7} criterion {cid:<3} {desc}"
        if measured:
            line += "  [" + "; ".join(measured) + "]"
        terminalreporter.write_line(line)


@pytest.fixture
def measured(request):
    """Attach a short measurement string to the acceptance summary line."""
    def note(text):
        request.node.user_properties.append(("measured", text))
    return note
