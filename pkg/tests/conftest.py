import numpy as np
import pytest

from realm.embedding import MockFieldBackend


def unit(dim, i):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


@pytest.fixture
def make_mock():
    def factory(regions=(), dim=8, text_axis=0, base_axis=1, max_batch=64):
        text = unit(dim, text_axis)
        return MockFieldBackend(unit(dim, base_axis), text, regions, max_batch=max_batch)
    return factory


@pytest.fixture(scope="session")
def smoke_manifest(tmp_path_factory):
    from realm.synthetic import make_smoke_dataset

    return make_smoke_dataset(tmp_path_factory.mktemp("smoke"), n=32, seed=0)


_acceptance = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion label")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    label = dict(report.user_properties).get("criterion")
    if label:
        _acceptance.append((label, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in _acceptance:
        terminalreporter.write_line(f"[{'PASS' if outcome == 'passed' else 'FAIL'}] {label}")


@pytest.fixture
def criterion(record_property):
    def set_label(name):
        record_property("criterion", name)
    return set_label
