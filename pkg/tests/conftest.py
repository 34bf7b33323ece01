import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kgat.checks import random_instance
from kgat.data import RESERVED, Vocabulary

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

WORDS = [f"w{i}" for i in range(20)]


@pytest.fixture(scope="session")
def word_vocab():
    return Vocabulary(list(RESERVED) + WORDS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_instances(seed, n, with_pad=False, max_tokens=8):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        inst = random_instance(rng, with_pad=with_pad, max_tokens=max_tokens)
        inst.claim_id = f"c{i}"
        out.append(inst)
    return out


def pytest_terminal_summary(terminalreporter):
    import sys
    log = sys.modules.get("acceptance_log")
    if log is None or not log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in log.lines():
        terminalreporter.write_line(line)
