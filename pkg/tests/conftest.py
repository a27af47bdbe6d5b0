from pathlib import Path

import numpy as np
import pytest
import torch

from flowrec.config import ModelConfig

REPO = Path(__file__).resolve().parents[1]
ML100K = REPO / "data" / "ml-100k" / "u.data"


def toy_model_config(**overrides) -> ModelConfig:
    base = dict(dim=8, heads=2, decoder1_layers=1, decoder2_layers=1, ff_mult=2,
                dropout=0.0, max_len=3, recon_hidden=(16, 16), init_std=0.3)
    base.update(overrides)
    return ModelConfig(**base)


def write_log(path: Path, rows) -> Path:
    path.write_text("".join("\t".join(str(c) for c in row) + "\n" for row in rows))
    return path


def cyclic_rows(user="u1", length=12, n_items=3):
    """One user cycling deterministically through ``n_items`` items."""
    return [(user, f"i{j % n_items}", 5, 100 + j) for j in range(length)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    detail = getattr(item, "criterion_detail", "")
    item.config._criteria[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        title, status, detail = criteria[number]
        line = f"criterion {number:>2}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
