"""Shared fixtures and the per-criterion acceptance summary."""
from __future__ import annotations

from collections import defaultdict

import numpy as np
import pytest

from splitlearn.data import synthetic

_results: dict[str, list[str]] = defaultdict(list)
_titles: dict[str, str] = {}
_notes: dict[str, list[str]] = defaultdict(list)


def pytest_runtest_logreport(report):
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    number, title = marks
    number = str(number)
    _titles[number] = title
    if report.when == "call" or report.outcome != "passed":
        _results[number].append("skipped" if report.skipped else report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _titles:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_titles, key=lambda n: (len(n), n)):
        outcomes = _results[number]
        if any(o == "failed" for o in outcomes):
            verdict = "FAIL"
        elif outcomes and all(o == "passed" for o in outcomes):
            verdict = "PASS"
        elif any(o == "passed" for o in outcomes):
            verdict = "PARTIAL"
        else:
            verdict = "NOT RUN"
        notes = "; ".join(_notes[number])
        terminalreporter.write_line(f"criterion {number}: {verdict:<8} {_titles[number]}"
                                    + (f" [{notes}]" if notes else ""))


@pytest.fixture
def note(request):
    """Attach a measured value to the test's criterion line in the summary."""
    mark = request.node.get_closest_marker("criterion")
    key = str(mark.args[0]) if mark else request.node.name
    return lambda text: _notes[key].append(text)


@pytest.fixture(scope="session")
def synth4():
    """Small 4-class synthetic set (train, test) at 28x28."""
    train = synthetic(256, 4, 28, seed=3, split_key=0)
    test = synthetic(128, 4, 28, seed=3, split_key=1)
    return train, test


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
