import os

import numpy as np
import pytest

_VERDICTS: dict = {}


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DOMAINSHIFT_LONGRUN") == "1":
        return
    skip = pytest.mark.skip(reason="full-scale run; set DOMAINSHIFT_LONGRUN=1 to enable")
    for item in items:
        if "longrun" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[key])


@pytest.fixture
def verdict():
    """Record and print one pass/fail line for an acceptance criterion; returns ``ok``."""

    def record(number, ok, detail, label=None):
        line = f"criterion {label or number:>4}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[(number, label or "")] = line
        print(line)
        return ok

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
