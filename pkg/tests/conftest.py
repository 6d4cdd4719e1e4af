import numpy as np
import pytest
import torch

from aikd.model import BackboneSpec, IncrementalNet

torch.set_num_threads(1)


@pytest.fixture
def spec():
    return BackboneSpec(channels=(4, 8, 8, 16), embed_dim=16, input_size=16)


@pytest.fixture
def net(spec):
    torch.manual_seed(0)
    m = IncrementalNet(spec)
    m.expand_head(range(4))
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance criterion bookkeeping --------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            num, title = mark.args
            _CRITERIA.setdefault(num, {"title": title, "outcomes": {}})
            _CRITERIA[num]["outcomes"][item.nodeid] = "not run"


def pytest_runtest_logreport(report):
    for entry in _CRITERIA.values():
        if report.nodeid not in entry["outcomes"]:
            continue
        prev = entry["outcomes"][report.nodeid]
        if report.failed:
            entry["outcomes"][report.nodeid] = "failed"
        elif report.skipped and prev != "failed":
            entry["outcomes"][report.nodeid] = "skipped"
        elif report.when == "call" and report.passed and prev == "not run":
            entry["outcomes"][report.nodeid] = "passed"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        entry = _CRITERIA[num]
        states = set(entry["outcomes"].values())
        if "failed" in states:
            verdict = "FAIL"
        elif states == {"passed"}:
            verdict = "PASS"
        elif states <= {"skipped", "passed"} and "skipped" in states:
            verdict = "SKIP"
        else:
            verdict = "NOT RUN"
        terminalreporter.write_line(f"criterion {num} ({entry['title']}): {verdict}")
