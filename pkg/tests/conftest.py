from __future__ import annotations

import numpy as np
import pytest

from dcdkit.model import ModelConfig, build_model
from dcdkit.tasks import default_vocab

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number and summary")
    config.addinivalue_line("markers", "slow: needs a trained model")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, text = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        ok = rep.outcome == "passed"
        prev = _CRITERIA.get(n, (True, text))[0]
        _CRITERIA[n] = (prev and ok, text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, text = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


def small_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, n_heads=2, d_model=32, d_head=8, d_mlp=32, vocab_size=len(default_vocab()),
                max_seq_len=36, norm_mode="none", seed=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    return build_model(small_config(), init_std=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
