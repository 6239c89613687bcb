import os
from pathlib import Path

import pytest

from aqflow import load_case

DATA = Path(__file__).parent / "data"
CASES = ["case4gs", "case5", "case6ww", "case9", "case14", "case30"]
CRITERIA_LINES: list[str] = []  # filled by the acceptance suite, echoed in the terminal summary


def case_path(name: str) -> str:
    return os.fspath(DATA / f"{name}.m")


@pytest.fixture(scope="session")
def load():
    cache = {}

    def _load(name):
        if name not in cache:
            cache[name] = load_case(case_path(name))
        return cache[name]

    return _load


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
