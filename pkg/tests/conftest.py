import numpy as np
import pytest

from mlct.codec import CodecConfig, train_codec
from mlct.data import CorpusSpec, generate_corpus

SMALL_SPEC = CorpusSpec(2, 30, 24, 48, 4, 0)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_codec(small_corpus):
    """A 600-step codec on 60 items; enough to separate two classes."""
    params, log = train_codec(small_corpus, CodecConfig(width=48, steps=600, lr=3e-3, batch=16))
    return params, log


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if acceptance_report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_report.LINES):
            terminalreporter.write_line(line)
