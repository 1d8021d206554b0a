import logging

import numpy as np
import pytest

from endocss.config import toy_config
from endocss.datamodel import synth_shapes_dataset

_AC_LINES: list[str] = []


@pytest.fixture
def ac_report():
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""

    def report(ident: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {ident}: {detail}"
        print(line)
        _AC_LINES.append(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if not _AC_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_AC_LINES, key=lambda s: int(s.split("AC")[1].split(":")[0])):
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture(scope="session")
def shapes5():
    """250 shapes samples with 4 foreground classes, first 200 for training."""
    ds = synth_shapes_dataset(250, 5, (64, 64), seed=0)
    return ds.with_samples(ds.samples[:200]), ds.with_samples(ds.samples[200:])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quick_config():
    return toy_config(epochs_first=2, epochs_later=1)
