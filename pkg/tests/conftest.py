import logging

import numpy as np
import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)
settings.register_profile("apc", deadline=None, max_examples=60)
settings.load_profile("apc")


@pytest.fixture(autouse=True)
def _quiet_correct_warnings():
    # shortlist-shrink warnings are expected on tiny catalogs
    logging.getLogger("apc.correct").setLevel(logging.ERROR)
    yield
    logging.getLogger("apc.correct").setLevel(logging.NOTSET)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def zero_model(n_items=10, max_len=6, dim=4, backbone="attention-mini"):
    from apc.model import SequentialScorer

    return SequentialScorer(n_items, max_len, dim, backbone, init="zeros").double().eval()


def tiny_model(seed=0, n_items=20, max_len=6, dim=8, backbone="attention-mini"):
    from apc.checks import random_model

    return random_model(np.random.default_rng(seed), n_items, max_len, dim, backbone)


ACCEPTANCE_LINES: list[str] = []


def record(number: int, name: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {name} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
