import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from gamkit.backend import ImageTensor  # noqa: E402
from gamkit.models import load_model  # noqa: E402

_acceptance = {}


@pytest.fixture
def toy():
    """Seeded two-block toy CNN in float64."""
    return load_model("toycnn", seed=3, dtype=torch.float64)


@pytest.fixture
def toy_image():
    return ImageTensor(np.random.default_rng(11).normal(size=(1, 8, 8)))


def pytest_runtest_logreport(report):
    marker = _acceptance.get(report.nodeid)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        marker["outcome"] = report.outcome


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _acceptance[item.nodeid] = {"id": m.args[0], "title": m.args[1], "outcome": "not run"}


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    rows = {}
    for entry in _acceptance.values():
        key = (entry["id"], entry["title"])
        prev = rows.get(key)
        # a criterion with several test functions passes only if all pass
        if prev is None or prev == "passed":
            rows[key] = entry["outcome"]
    for (cid, title), outcome in sorted(rows.items(), key=lambda kv: int(kv[0][0])):
        label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[{label}] AC{cid}: {title}")
