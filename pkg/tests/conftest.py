import pytest
import torch

from auxgan.phantom import generate_dataset


@pytest.fixture(scope="session", autouse=True)
def _deterministic():
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """64-pixel dataset: 6 paired (2 eval) and 8 CT (2 eval) cases."""
    return generate_dataset(6, 8, 64, 3, tmp_path_factory.mktemp("small"), eval_fraction=0.3)


@pytest.fixture(scope="session")
def no_ct_data(tmp_path_factory):
    """Train split holds 2 paired cases and no CT (the single CT is eval)."""
    return generate_dataset(4, 1, 64, 4, tmp_path_factory.mktemp("no_ct"), eval_fraction=0.6)


_CRITERIA = {}  # criterion number -> (passed, detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number reported in the summary")


def pytest_runtest_logreport(report):
    failed_setup = report.when == "setup" and report.outcome != "passed"
    if report.when != "call" and not failed_setup:
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _CRITERIA[props["criterion"]] = (report.outcome == "passed", props.get("detail", ""))


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is not None and not any(k == "criterion" for k, _ in item.user_properties):
        item.user_properties.append(("criterion", marker.args[0]))


@pytest.fixture
def detail(request):
    """Record a one-line measurement for the acceptance summary."""

    def put(text):
        request.node.user_properties.append(("detail", text))

    return put


def pytest_terminal_summary(terminalreporter, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, text = _CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {text}")
