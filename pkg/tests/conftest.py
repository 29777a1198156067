import numpy as np
import pytest
import torch

from synthgap.data import DatasetSpec, generate_dataset
from synthgap.model import ArchitectureConfig
from synthgap.trainer import TrainConfig

torch.set_num_threads(1)

TINY_ARCH = ArchitectureConfig(stage_widths=(4, 8), blocks_per_stage=1, num_categories=4, head_temperature=0.1)
TINY_TRAIN = TrainConfig(epochs=2, batch_size=32, base_lr=0.05, warmup_epochs=0, seed=3, last_k=2)


_ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    _ACCEPTANCE[marker.args[0]] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")


@pytest.fixture
def verdict(record_property, capsys):
    """Record the one-line outcome of an acceptance check, then assert it."""

    def check(ok: bool, detail: str):
        record_property("detail", detail)
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {detail}")
        assert ok, detail

    return check


@pytest.fixture(scope="session")
def small_pair(tmp_path_factory):
    """Small real/proxy pair with 4 categories, 32x32 images."""
    root = tmp_path_factory.mktemp("small-pair")
    common = dict(num_categories=4, per_category_train=24, per_category_val=8, seed=11)
    real = generate_dataset(DatasetSpec(distribution="real", **common), root / "real")
    proxy = generate_dataset(DatasetSpec(distribution="proxy", fidelity=0.5, **common), root / "proxy")
    return real, proxy


@pytest.fixture(scope="session")
def default_real(tmp_path_factory):
    return generate_dataset(DatasetSpec(), tmp_path_factory.mktemp("default") / "real")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
