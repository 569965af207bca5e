import numpy as np
import pytest
import torch

from c2gan.nets import NetConfig
from c2gan.pipeline import collate
from c2gan.synthdata import make_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(12, seed=3)


@pytest.fixture
def tiny_cfg():
    """Cheap networks on 64 px inputs for behavioural tests."""
    return NetConfig(base_filters=4, unet_depth=4, patch_layers=2)


@pytest.fixture
def batch(small_dataset):
    return collate(small_dataset.pairs[:2])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


_verdicts = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    name = dict(report.user_properties).get("criterion")
    if name is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _verdicts.append((verdict, name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for verdict, name, detail in _verdicts:
        terminalreporter.write_line(f"{verdict} {name}" + (f"  [{detail}]" if detail else ""))
