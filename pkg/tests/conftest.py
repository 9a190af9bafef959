import pytest

from mmfusion.config import preset


def tiny_config(task="expr", **changes):
    """A seconds-scale run: few short videos, one GRU layer, two epochs."""
    base = {
        "epochs": 2,
        "folds": 2,
        "model.gru_layers": 1,
        "model.M": 2,
        "model.model_dim": 8,
        "model.hidden_size": 8,
        "model.head_count": 2,
        "model.head_hidden": 8,
        "synthetic.videos_per_class": 1,
        "synthetic.frames_per_video": 40,
        "synthetic.run_length_min": 5,
        "synthetic.run_length_max": 20,
        "resample.n_minor": 10,
        "resample.n_major": 5,
    }
    base.update(changes)
    return preset("ci", task).replace(**base)


@pytest.fixture
def tiny():
    return tiny_config


_criteria: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    n, title = marker.args
    ok = report.passed and _criteria.get(n, (title, True))[1]
    if report.when == "call" or not report.passed:
        _criteria[n] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok = _criteria[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {title}")
