import json

import numpy as np
import pytest

from cellomaps.codec import CellOMap
from cellomaps.ingest import CellClass


@pytest.fixture
def write_json(tmp_path):
    def _write(doc, name="nuclei.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc), encoding="utf-8")
        return path
    return _write


def random_map(rng, width, height, channels, density=0.1, mpp=2.0):
    classes = list(CellClass)
    picked = [classes[i] for i in rng.choice(len(classes), channels, replace=False)]
    bits = rng.random((channels, height, width)) < density
    return CellOMap.from_bits(bits, picked, mpp)


# one summary line per acceptance criterion, printed after the run
_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[report.nodeid.split("::")[-1]] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[name]
        number, _, label = name[len("test_criterion_"):].partition("_")
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {int(number):2d} {label:<24} {status}  {detail}")
