from __future__ import annotations

import functools

import pytest
from hypothesis import HealthCheck, settings

from repacklab.harness import DEV_KEY, CorpusSpec, gen_corpus, input_suite
from repacklab.protect import SchemeConfig, protect

settings.register_profile("repacklab", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repacklab")

# acceptance verdict lines, printed after the test session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])


@functools.lru_cache(maxsize=None)
def corpus(n: int = 20, seed: int = 0):
    return tuple(gen_corpus(CorpusSpec(seed=seed, n_programs=n)))


@functools.lru_cache(maxsize=None)
def suite(index: int, size: int = 100):
    return tuple(input_suite(corpus()[index], size))


@functools.lru_cache(maxsize=None)
def protected(scheme: str, index: int, **overrides):
    cfg = SchemeConfig(scheme, **overrides)
    return protect(corpus()[index], cfg, DEV_KEY)


@pytest.fixture(scope="session")
def default_corpus():
    return corpus()


@pytest.fixture
def app():
    return corpus()[0]
