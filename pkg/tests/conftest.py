import logging
import warnings

import numpy as np
import pytest
import torch

from embinv.embedders import SyntheticEmbedder

torch.set_num_threads(1)
warnings.filterwarnings("ignore", message=".*mismatched key_padding_mask.*")

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def emb():
    return SyntheticEmbedder(dim=32, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture(scope="session")
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion; returns the pass flag."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:2d}  {title}: {detail}"
        store[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
